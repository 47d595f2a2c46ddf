#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/nn/tensor.hpp"
#include "zmesh/rng.hpp"
#include "zmesh/volume.hpp"

namespace zmesh {

// Restoration pretext data: 6-channel sub-volumes (T2W, DWI, ADC, BG, CG,
// PZ), image channels unit-range normalized. Corruption touches only the
// image channels; the zonal channels ride along as conditioning input.

inline constexpr int kImageChannels = 3;
inline constexpr int kSubVolumeChannels = 6;

struct SubVolume {
  nn::Tensor<float> data;  // (6, Z, Y, X)
  std::string case_id;
  Dims3 origin;
  bool padded = false;  // source ROI was smaller than the block
};

enum class CutoutKind { none, inner, outer };

struct CutoutWindow {
  Dims3 lo, hi;  // half-open box
  float fill = 0.0f;

  std::int64_t voxels() const {
    return (hi.z - lo.z) * (hi.y - lo.y) * (hi.x - lo.x);
  }
};

/// One sampled combination of the four transformations with every parameter
/// frozen, so application is bit-deterministic.
struct CorruptionRecipe {
  bool nonlinear = false;
  bool decreasing = false;      // inverted Bezier variant
  double bezier_p1[2] = {0, 0};  // interior control points (x, y)
  double bezier_p2[2] = {0, 0};

  bool shuffle = false;
  std::uint64_t shuffle_seed = 0;
  int shuffle_windows = 0;
  Dims3 shuffle_window_max{2, 8, 8};

  CutoutKind cutout = CutoutKind::none;
  std::vector<CutoutWindow> cutout_boxes;  // inner: masked; outer: kept union
  float outer_fill = 0.0f;

  std::uint64_t seed = 0;  // provenance

  /// Flag-combination class, 0..11 (identity + 4 singles + 7 combinations).
  int flag_class() const {
    return (nonlinear ? 1 : 0) + (shuffle ? 2 : 0) + 4 * static_cast<int>(cutout);
  }
};

struct CorruptionConfig {
  Dims3 subvol_dims{16, 64, 64};
  double p_nonlinear = 0.9;
  double p_shuffle = 0.5;
  double p_inner = 0.3;
  double p_outer = 0.3;
  double p_decreasing = 0.5;
  int shuffle_windows = 1000;
  Dims3 shuffle_window_max{2, 8, 8};
  int inner_windows_max = 5;
  int outer_windows_max = 10;
  double max_cutout_fraction = 0.25;

  void validate() const {
    auto in01 = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!in01(p_nonlinear) || !in01(p_shuffle) || !in01(p_inner) ||
        !in01(p_outer) || !in01(p_decreasing)) {
      throw std::invalid_argument("CorruptionConfig: probabilities in [0,1]");
    }
    if (p_inner + p_outer > 1.0) {
      throw std::invalid_argument(
          "CorruptionConfig: cutout branch probabilities exceed 1");
    }
    if (subvol_dims.z <= 0 || subvol_dims.y <= 0 || subvol_dims.x <= 0) {
      throw std::invalid_argument("CorruptionConfig: bad sub-volume dims");
    }
  }
};

// ---------------------------------------------------------------------------
// Sub-volume extraction
// ---------------------------------------------------------------------------

/// Assembles the 6-channel block for a case: unit-range images + one-hot
/// zones. The case must be preprocessed (shared grid across constituents).
inline nn::Tensor<float> case_to_channels(const CaseRecord& rec,
                                          NormMode image_norm) {
  const Volume img = normalize(rec.image, image_norm);
  const Volume hot = one_hot(rec.zones);
  const Dims3 d = img.dims();
  nn::Tensor<float> t({kSubVolumeChannels, d.z, d.y, d.x});
  const std::int64_t n = d.voxels();
  for (int c = 0; c < 3; ++c) {
    std::copy(img.channel(c), img.channel(c) + n, t.data() + c * n);
    std::copy(hot.channel(c), hot.channel(c) + n, t.data() + (3 + c) * n);
  }
  return t;
}

/// Uniformly crops S blocks from the case ROI; zero-pads cases smaller than
/// the block. Deterministic in the seed.
inline std::vector<SubVolume> sample_subvolumes(const CaseRecord& rec,
                                                int count, std::uint64_t seed,
                                                Dims3 block = {16, 64, 64}) {
  if (count < 1) throw std::invalid_argument("sample_subvolumes: count >= 1");
  nn::Tensor<float> channels = case_to_channels(rec, NormMode::unit_range);
  Dims3 d = rec.image.dims();
  bool padded = false;
  if (d.z < block.z || d.y < block.y || d.x < block.x) {
    const Dims3 grown{std::max(d.z, block.z), std::max(d.y, block.y),
                      std::max(d.x, block.x)};
    nn::Tensor<float> big({kSubVolumeChannels, grown.z, grown.y, grown.x});
    for (int c = 0; c < kSubVolumeChannels; ++c) {
      for (std::int64_t z = 0; z < d.z; ++z) {
        for (std::int64_t y = 0; y < d.y; ++y) {
          const float* src = channels.data() + ((c * d.z + z) * d.y + y) * d.x;
          std::copy(src, src + d.x, &big.at(c, z, y, 0));
        }
      }
    }
    channels = std::move(big);
    d = grown;
    padded = true;
  }

  Rng rng(seed);
  std::vector<SubVolume> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    SubVolume sv;
    sv.case_id = rec.id;
    sv.padded = padded;
    sv.origin = {rng.uniform_int(0, d.z - block.z),
                 rng.uniform_int(0, d.y - block.y),
                 rng.uniform_int(0, d.x - block.x)};
    sv.data = nn::Tensor<float>({kSubVolumeChannels, block.z, block.y, block.x});
    for (int c = 0; c < kSubVolumeChannels; ++c) {
      for (std::int64_t z = 0; z < block.z; ++z) {
        for (std::int64_t y = 0; y < block.y; ++y) {
          const float* src = &channels.at(c, sv.origin.z + z, sv.origin.y + y,
                                          sv.origin.x);
          std::copy(src, src + block.x, &sv.data.at(c, z, y, 0));
        }
      }
    }
    out.push_back(std::move(sv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recipe sampling
// ---------------------------------------------------------------------------

namespace detail {

inline double cutout_fraction(const std::vector<CutoutWindow>& boxes,
                              Dims3 dims, bool complement) {
  std::vector<char> hit(static_cast<std::size_t>(dims.voxels()), 0);
  for (const auto& w : boxes) {
    for (std::int64_t z = w.lo.z; z < w.hi.z; ++z) {
      for (std::int64_t y = w.lo.y; y < w.hi.y; ++y) {
        std::fill(hit.begin() + ((z * dims.y + y) * dims.x + w.lo.x),
                  hit.begin() + ((z * dims.y + y) * dims.x + w.hi.x), char(1));
      }
    }
  }
  std::int64_t covered = 0;
  for (char h : hit) covered += h;
  const double frac = double(covered) / double(dims.voxels());
  return complement ? 1.0 - frac : frac;
}

inline CutoutWindow random_box(Rng& rng, Dims3 dims, double lo_frac,
                               double hi_frac) {
  auto axis = [&](std::int64_t extent) {
    const std::int64_t lo = std::max<std::int64_t>(1, std::int64_t(lo_frac * double(extent)));
    const std::int64_t hi = std::max(lo, std::int64_t(hi_frac * double(extent)));
    const std::int64_t size = rng.uniform_int(lo, hi);
    const std::int64_t start = rng.uniform_int(0, extent - size);
    return std::pair{start, start + size};
  };
  CutoutWindow w;
  auto [z0, z1] = axis(dims.z);
  auto [y0, y1] = axis(dims.y);
  auto [x0, x1] = axis(dims.x);
  w.lo = {z0, y0, x0};
  w.hi = {z1, y1, x1};
  return w;
}

}  // namespace detail

/// Draws the transformation flags and freezes every parameter. Inner and
/// outer cutout are mutually exclusive branches of one categorical draw.
inline CorruptionRecipe sample_recipe(const CorruptionConfig& cfg,
                                      std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  CorruptionRecipe r;
  r.seed = seed;

  r.nonlinear = rng.bernoulli(cfg.p_nonlinear);
  if (r.nonlinear) {
    r.decreasing = rng.bernoulli(cfg.p_decreasing);
    double xs[2] = {rng.uniform(), rng.uniform()};
    double ys[2] = {rng.uniform(), rng.uniform()};
    if (xs[0] > xs[1]) std::swap(xs[0], xs[1]);
    if (ys[0] > ys[1]) std::swap(ys[0], ys[1]);
    // monotone parameterization: sorted interior coordinates (descending y
    // for the inverted variant)
    r.bezier_p1[0] = xs[0];
    r.bezier_p2[0] = xs[1];
    if (r.decreasing) {
      r.bezier_p1[1] = ys[1];
      r.bezier_p2[1] = ys[0];
    } else {
      r.bezier_p1[1] = ys[0];
      r.bezier_p2[1] = ys[1];
    }
  }

  r.shuffle = rng.bernoulli(cfg.p_shuffle);
  if (r.shuffle) {
    r.shuffle_seed = rng.next_u64();
    r.shuffle_windows = cfg.shuffle_windows;
    r.shuffle_window_max = cfg.shuffle_window_max;
  }

  const double u = rng.uniform();
  if (u < cfg.p_inner) r.cutout = CutoutKind::inner;
  else if (u < cfg.p_inner + cfg.p_outer) r.cutout = CutoutKind::outer;

  const Dims3 dims = cfg.subvol_dims;
  if (r.cutout == CutoutKind::inner) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      std::vector<CutoutWindow> boxes;
      const int n = static_cast<int>(rng.uniform_int(1, cfg.inner_windows_max));
      for (int k = 0; k < n; ++k) {
        CutoutWindow w = detail::random_box(rng, dims, 0.10, 0.40);
        w.fill = static_cast<float>(rng.uniform());
        boxes.push_back(w);
      }
      if (detail::cutout_fraction(boxes, dims, false) < cfg.max_cutout_fraction) {
        r.cutout_boxes = std::move(boxes);
        break;
      }
    }
    if (r.cutout_boxes.empty()) {
      CutoutWindow w = detail::random_box(rng, dims, 0.10, 0.12);
      w.fill = static_cast<float>(rng.uniform());
      r.cutout_boxes = {w};
    }
  } else if (r.cutout == CutoutKind::outer) {
    r.outer_fill = static_cast<float>(rng.uniform());
    for (int attempt = 0; attempt < 500; ++attempt) {
      std::vector<CutoutWindow> boxes;
      const int n = static_cast<int>(rng.uniform_int(1, cfg.outer_windows_max));
      for (int k = 0; k < n; ++k) {
        boxes.push_back(detail::random_box(rng, dims, 0.70, 1.0));
      }
      if (detail::cutout_fraction(boxes, dims, true) < cfg.max_cutout_fraction) {
        r.cutout_boxes = std::move(boxes);
        break;
      }
    }
    if (r.cutout_boxes.empty()) {
      r.cutout_boxes = {CutoutWindow{{0, 0, 0}, dims, 0.0f}};
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Transformations
// ---------------------------------------------------------------------------

namespace detail {

/// Dense cubic Bezier lookup; x(t) is monotone by the sorted-x construction,
/// so the curve is the graph of a function y(x) on [0,1].
struct BezierLut {
  std::vector<double> xs, ys;

  BezierLut(const double p1[2], const double p2[2], bool decreasing) {
    const double x0 = 0.0, x3 = 1.0;
    const double y0 = decreasing ? 1.0 : 0.0;
    const double y3 = decreasing ? 0.0 : 1.0;
    constexpr int kSamples = 1025;
    xs.resize(kSamples);
    ys.resize(kSamples);
    for (int k = 0; k < kSamples; ++k) {
      const double t = double(k) / double(kSamples - 1);
      const double u = 1.0 - t;
      const double b0 = u * u * u, b1 = 3 * u * u * t, b2 = 3 * u * t * t,
                   b3 = t * t * t;
      xs[static_cast<std::size_t>(k)] = b0 * x0 + b1 * p1[0] + b2 * p2[0] + b3 * x3;
      ys[static_cast<std::size_t>(k)] = b0 * y0 + b1 * p1[1] + b2 * p2[1] + b3 * y3;
    }
  }

  double map(double v) const {
    v = std::clamp(v, 0.0, 1.0);
    const auto it = std::lower_bound(xs.begin(), xs.end(), v);
    if (it == xs.begin()) return ys.front();
    if (it == xs.end()) return ys.back();
    const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
    const std::size_t lo = hi - 1;
    const double den = xs[hi] - xs[lo];
    if (den < 1e-12) return ys[lo];
    const double f = (v - xs[lo]) / den;
    return ys[lo] * (1.0 - f) + ys[hi] * f;
  }
};

}  // namespace detail

/// Maps image-channel intensities through the recipe's Bezier curve; zonal
/// channels are untouched. Output stays in [0,1].
inline SubVolume apply_nonlinear(const SubVolume& sv, const double p1[2],
                                 const double p2[2], bool decreasing) {
  detail::BezierLut lut(p1, p2, decreasing);
  SubVolume out = sv;
  const std::int64_t n = sv.data.voxels();
  for (int c = 0; c < kImageChannels; ++c) {
    float* ch = out.data.data() + c * n;
    for (std::int64_t i = 0; i < n; ++i) {
      ch[i] = static_cast<float>(std::clamp(lut.map(double(ch[i])), 0.0, 1.0));
    }
  }
  return out;
}

/// Permutes voxels inside randomly placed windows, the same permutation for
/// all three image channels; preserves the global intensity multiset.
inline SubVolume apply_local_shuffle(const SubVolume& sv, int n_windows,
                                     Dims3 window_max, std::uint64_t seed) {
  if (n_windows < 0) throw std::invalid_argument("apply_local_shuffle: n >= 0");
  SubVolume out = sv;
  Rng rng(seed);
  const Dims3 d{sv.data.z(), sv.data.y(), sv.data.x()};
  const std::int64_t n = sv.data.voxels();
  std::vector<std::int64_t> idx;
  std::vector<std::int64_t> perm;
  std::vector<float> tmp;
  for (int w = 0; w < n_windows; ++w) {
    const std::int64_t sz = rng.uniform_int(1, std::min(window_max.z, d.z));
    const std::int64_t sy = rng.uniform_int(1, std::min(window_max.y, d.y));
    const std::int64_t sx = rng.uniform_int(1, std::min(window_max.x, d.x));
    const std::int64_t oz = rng.uniform_int(0, d.z - sz);
    const std::int64_t oy = rng.uniform_int(0, d.y - sy);
    const std::int64_t ox = rng.uniform_int(0, d.x - sx);
    idx.clear();
    for (std::int64_t z = oz; z < oz + sz; ++z) {
      for (std::int64_t y = oy; y < oy + sy; ++y) {
        for (std::int64_t x = ox; x < ox + sx; ++x) {
          idx.push_back((z * d.y + y) * d.x + x);
        }
      }
    }
    perm.resize(idx.size());
    for (std::size_t k = 0; k < perm.size(); ++k) {
      perm[k] = static_cast<std::int64_t>(k);
    }
    rng.shuffle(perm.begin(), perm.end());
    for (int c = 0; c < kImageChannels; ++c) {
      float* ch = out.data.data() + c * n;
      tmp.resize(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) tmp[k] = ch[idx[k]];
      for (std::size_t k = 0; k < idx.size(); ++k) {
        ch[idx[k]] = tmp[static_cast<std::size_t>(perm[k])];
      }
    }
  }
  return out;
}

/// Replaces window interiors by per-window constants, surroundings kept.
inline SubVolume apply_inner_cutout(const SubVolume& sv,
                                    const std::vector<CutoutWindow>& boxes) {
  SubVolume out = sv;
  const Dims3 d{sv.data.z(), sv.data.y(), sv.data.x()};
  const std::int64_t n = sv.data.voxels();
  for (const auto& w : boxes) {
    for (int c = 0; c < kImageChannels; ++c) {
      float* ch = out.data.data() + c * n;
      for (std::int64_t z = w.lo.z; z < w.hi.z; ++z) {
        for (std::int64_t y = w.lo.y; y < w.hi.y; ++y) {
          std::fill(ch + (z * d.y + y) * d.x + w.lo.x,
                    ch + (z * d.y + y) * d.x + w.hi.x, w.fill);
        }
      }
    }
  }
  return out;
}

/// Keeps the union of the given windows and floods everything outside it
/// with one constant.
inline SubVolume apply_outer_cutout(const SubVolume& sv,
                                    const std::vector<CutoutWindow>& boxes,
                                    float fill) {
  SubVolume out = sv;
  const Dims3 d{sv.data.z(), sv.data.y(), sv.data.x()};
  const std::int64_t n = sv.data.voxels();
  std::vector<char> keep(static_cast<std::size_t>(n), 0);
  for (const auto& w : boxes) {
    for (std::int64_t z = w.lo.z; z < w.hi.z; ++z) {
      for (std::int64_t y = w.lo.y; y < w.hi.y; ++y) {
        std::fill(keep.begin() + ((z * d.y + y) * d.x + w.lo.x),
                  keep.begin() + ((z * d.y + y) * d.x + w.hi.x), char(1));
      }
    }
  }
  for (int c = 0; c < kImageChannels; ++c) {
    float* ch = out.data.data() + c * n;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!keep[static_cast<std::size_t>(i)]) ch[i] = fill;
    }
  }
  return out;
}

/// Applies the enabled transformations in the fixed order nonlinear ->
/// shuffle -> cutout. Pure in (sub-volume, recipe).
inline SubVolume corrupt(const SubVolume& sv, const CorruptionRecipe& recipe) {
  SubVolume out = sv;
  if (recipe.nonlinear) {
    out = apply_nonlinear(out, recipe.bezier_p1, recipe.bezier_p2,
                          recipe.decreasing);
  }
  if (recipe.shuffle) {
    out = apply_local_shuffle(out, recipe.shuffle_windows,
                              recipe.shuffle_window_max, recipe.shuffle_seed);
  }
  if (recipe.cutout == CutoutKind::inner) {
    out = apply_inner_cutout(out, recipe.cutout_boxes);
  } else if (recipe.cutout == CutoutKind::outer) {
    out = apply_outer_cutout(out, recipe.cutout_boxes, recipe.outer_fill);
  }
  return out;
}

/// Restoration target: the original image channels.
inline nn::Tensor<float> restoration_target(const SubVolume& sv) {
  nn::Tensor<float> t({kImageChannels, sv.data.z(), sv.data.y(), sv.data.x()});
  std::copy(sv.data.data(), sv.data.data() + t.size(), t.data());
  return t;
}

}  // namespace zmesh
