#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/rng.hpp"
#include "zmesh/volume.hpp"

namespace zmesh {

// Synthetic anisotropic bpMRI: a CG ellipsoid nested in a PZ shell, 0-3
// spherical lesions (bright on DWI, dark on ADC and T2W), Gaussian noise.
// Entirely deterministic per seed.

struct PhantomParams {
  Dims3 dims{16, 128, 128};
  Spacing3 spacing{3.0, 0.5, 0.5};
  std::array<double, 2> gland_radius_z_mm{12.0, 16.0};
  std::array<double, 2> gland_radius_inplane_mm{16.0, 22.0};
  std::array<double, 2> cg_scale{0.50, 0.62};
  std::array<double, 2> lesion_radius_mm{4.0, 7.0};
  int max_lesions = 3;
  double positive_rate = 0.5;
  bool exact_balance = false;  // dataset-level: exactly round(rate*n) positives
  double pz_lesion_fraction = 0.75;
  double noise = 0.04;

  // per-channel tissue intensities (BG, CG, PZ) and lesion contrast
  std::array<std::array<double, 3>, 3> tissue{{
      {0.15, 0.55, 0.75},  // T2W
      {0.10, 0.30, 0.35},  // DWI
      {0.55, 0.65, 0.70},  // ADC
  }};
  std::array<double, 3> lesion_delta{-0.20, 0.45, -0.35};

  void validate() const {
    if (dims.z <= 0 || dims.y <= 0 || dims.x <= 0 || !spacing.positive()) {
      throw std::invalid_argument("PhantomParams: bad grid");
    }
    const double half_z = double(dims.z) * spacing.z / 2.0;
    const double half_y = double(dims.y) * spacing.y / 2.0;
    const double half_x = double(dims.x) * spacing.x / 2.0;
    if (gland_radius_z_mm[1] >= half_z ||
        gland_radius_inplane_mm[1] >= std::min(half_y, half_x)) {
      throw std::invalid_argument("PhantomParams: gland does not fit the grid");
    }
    if (noise < 0.0 || positive_rate < 0.0 || positive_rate > 1.0) {
      throw std::invalid_argument("PhantomParams: bad noise/positive rate");
    }
    if (lesion_radius_mm[0] <= 0.0 || max_lesions < 0) {
      throw std::invalid_argument("PhantomParams: bad lesion settings");
    }
  }
};

/// Generates one case. `force_positive` pins the patient label (used by the
/// exact-balance dataset mode); otherwise it is Bernoulli(positive_rate).
inline CaseRecord generate_case(const PhantomParams& params, std::uint64_t seed,
                                const std::string& id,
                                std::optional<bool> force_positive = std::nullopt) {
  params.validate();
  Rng rng(seed);
  const Dims3 d = params.dims;
  const Spacing3 sp = params.spacing;

  CaseRecord rec;
  rec.id = id;
  rec.zones = ZonalMask(d, sp);
  rec.image = Volume(3, d, sp);
  rec.lesions = Volume(1, d, sp);

  // gland geometry (mm, relative to the jittered center)
  const double cz = (double(d.z) - 1.0) / 2.0 * sp.z + rng.uniform(-sp.z, sp.z);
  const double cy = (double(d.y) - 1.0) / 2.0 * sp.y + rng.uniform(-4 * sp.y, 4 * sp.y);
  const double cx = (double(d.x) - 1.0) / 2.0 * sp.x + rng.uniform(-4 * sp.x, 4 * sp.x);
  const double rz = rng.uniform(params.gland_radius_z_mm[0], params.gland_radius_z_mm[1]);
  const double ry = rng.uniform(params.gland_radius_inplane_mm[0],
                                params.gland_radius_inplane_mm[1]);
  const double rx = rng.uniform(params.gland_radius_inplane_mm[0],
                                params.gland_radius_inplane_mm[1]);
  const double cg = rng.uniform(params.cg_scale[0], params.cg_scale[1]);

  std::vector<std::int64_t> cg_voxels, pz_voxels;
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const double pz_ = double(z) * sp.z - cz;
        const double py = double(y) * sp.y - cy;
        const double px = double(x) * sp.x - cx;
        const double outer = (pz_ * pz_) / (rz * rz) + (py * py) / (ry * ry) +
                             (px * px) / (rx * rx);
        if (outer > 1.0) continue;
        const double inner = outer / (cg * cg);
        const std::int64_t idx = rec.zones.index(z, y, x);
        if (inner <= 1.0) {
          rec.zones.data()[idx] = kLabelCG;
          cg_voxels.push_back(idx);
        } else {
          rec.zones.data()[idx] = kLabelPZ;
          pz_voxels.push_back(idx);
        }
      }
    }
  }
  if (cg_voxels.empty() || pz_voxels.empty()) {
    throw std::invalid_argument("generate_case: degenerate gland geometry");
  }

  const bool positive =
      force_positive ? *force_positive : rng.bernoulli(params.positive_rate);
  const int lesion_count =
      positive ? static_cast<int>(rng.uniform_int(1, std::max(1, params.max_lesions)))
               : 0;

  Volume& gt = *rec.lesions;
  for (int k = 0; k < lesion_count; ++k) {
    const bool in_pz = rng.bernoulli(params.pz_lesion_fraction);
    const auto& pool = in_pz ? pz_voxels : cg_voxels;
    const std::int64_t center = pool[static_cast<std::size_t>(
        rng.uniform_int(0, std::int64_t(pool.size()) - 1))];
    const double radius =
        rng.uniform(params.lesion_radius_mm[0], params.lesion_radius_mm[1]);
    const std::int64_t lz = center / (d.y * d.x);
    const std::int64_t ly = (center / d.x) % d.y;
    const std::int64_t lx = center % d.x;
    const std::int64_t span_z = std::int64_t(std::ceil(radius / sp.z));
    const std::int64_t span_y = std::int64_t(std::ceil(radius / sp.y));
    const std::int64_t span_x = std::int64_t(std::ceil(radius / sp.x));
    for (std::int64_t z = std::max<std::int64_t>(0, lz - span_z);
         z <= std::min(d.z - 1, lz + span_z); ++z) {
      for (std::int64_t y = std::max<std::int64_t>(0, ly - span_y);
           y <= std::min(d.y - 1, ly + span_y); ++y) {
        for (std::int64_t x = std::max<std::int64_t>(0, lx - span_x);
             x <= std::min(d.x - 1, lx + span_x); ++x) {
          const double dz = double(z - lz) * sp.z;
          const double dy = double(y - ly) * sp.y;
          const double dx = double(x - lx) * sp.x;
          if (dz * dz + dy * dy + dx * dx > radius * radius) continue;
          const std::int64_t idx = rec.zones.index(z, y, x);
          if (rec.zones.data()[idx] == kLabelBG) continue;  // lesions stay in-gland
          gt.data()[idx] = 1.0f;
        }
      }
    }
  }
  rec.positive = positive;

  // image synthesis: tissue base + lesion contrast + Gaussian noise
  const std::int64_t n = d.voxels();
  for (int c = 0; c < 3; ++c) {
    float* ch = rec.image.channel(c);
    for (std::int64_t i = 0; i < n; ++i) {
      double v = params.tissue[static_cast<std::size_t>(c)]
                              [rec.zones.data()[i]];
      if (gt.data()[i] > 0.5f) v += params.lesion_delta[static_cast<std::size_t>(c)];
      ch[i] = static_cast<float>(v + rng.normal(0.0, params.noise));
    }
  }
  return rec;
}

/// n cases with per-case seeds derived from the master seed; ids carry the
/// master seed so distinct seeds produce disjoint id namespaces.
inline std::vector<CaseRecord> generate_dataset(int n, const PhantomParams& params,
                                                std::uint64_t master_seed) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n >= 1");
  params.validate();

  std::vector<std::optional<bool>> labels(static_cast<std::size_t>(n));
  if (params.exact_balance) {
    const int positives = static_cast<int>(std::llround(params.positive_rate * n));
    std::vector<char> flags(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < positives && i < n; ++i) flags[static_cast<std::size_t>(i)] = 1;
    Rng shuffle_rng(derive_seed(master_seed, 0));
    shuffle_rng.shuffle(flags.begin(), flags.end());
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = flags[static_cast<std::size_t>(i)] != 0;
    }
  }

  std::vector<CaseRecord> cases;
  cases.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "c%llu_%04d",
                  static_cast<unsigned long long>(master_seed), i);
    cases.push_back(generate_case(params, derive_seed(master_seed, 1 + std::uint64_t(i)),
                                  id, labels[static_cast<std::size_t>(i)]));
  }
  return cases;
}

}  // namespace zmesh
