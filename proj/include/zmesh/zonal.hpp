#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "zmesh/cc.hpp"
#include "zmesh/volume.hpp"

namespace zmesh {

// Cleanup of predicted zonal masks. Four rules, applied in this order:
//   1. a single connected component is kept as-is;
//   2. components containing only one kind of anatomical region are removed;
//   3. on large-FOV images, only the component closest to the volume
//      midpoint survives;
//   4. of whatever remains, only the largest component survives.

enum class FovClass { normal, large };

struct ZonalComponent {
  std::vector<std::int64_t> voxels;  // sorted
  std::int64_t cg_count = 0, pz_count = 0;
  std::array<double, 3> centroid{};  // (z, y, x) voxel coords

  std::int64_t size() const { return static_cast<std::int64_t>(voxels.size()); }
  bool mixed() const { return cg_count > 0 && pz_count > 0; }
};

/// Components over the non-background voxel set, ordered by decreasing size
/// (ties by centroid lexicographic order).
inline std::vector<ZonalComponent> zonal_components(const ZonalMask& mask) {
  const std::uint8_t* labels = mask.data();
  auto raw = connected_components_26(
      mask.dims(), [labels](std::int64_t i) { return labels[i] != kLabelBG; });
  std::vector<ZonalComponent> out;
  out.reserve(raw.size());
  for (auto& voxels : raw) {
    ZonalComponent c;
    c.centroid = component_centroid(voxels, mask.dims());
    for (std::int64_t v : voxels) {
      if (labels[v] == kLabelCG) ++c.cg_count;
      else ++c.pz_count;
    }
    c.voxels = std::move(voxels);
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const ZonalComponent& a,
                                       const ZonalComponent& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.centroid < b.centroid;
  });
  return out;
}

/// In-plane physical extent exceeding the threshold classifies a large FOV.
inline FovClass classify_fov(Dims3 dims, Spacing3 spacing,
                             double threshold_mm = 120.0) {
  const double ext_y = double(dims.y) * spacing.y;
  const double ext_x = double(dims.x) * spacing.x;
  return (ext_y > threshold_mm || ext_x > threshold_mm) ? FovClass::large
                                                        : FovClass::normal;
}

inline ZonalMask postprocess_zones(const ZonalMask& mask, FovClass fov) {
  std::vector<ZonalComponent> comps = zonal_components(mask);
  if (comps.size() <= 1) return mask;  // rule 1

  // rule 2: drop single-region components, unless that would empty the mask
  {
    std::vector<ZonalComponent> mixed;
    for (auto& c : comps) {
      if (c.mixed()) mixed.push_back(std::move(c));
    }
    if (!mixed.empty()) comps = std::move(mixed);
  }

  // rule 3: large FOV keeps the component nearest the volume midpoint (mm)
  if (fov == FovClass::large && comps.size() > 1) {
    const Dims3 d = mask.dims();
    const Spacing3 s = mask.spacing();
    const double mz = (double(d.z) - 1.0) / 2.0;
    const double my = (double(d.y) - 1.0) / 2.0;
    const double mx = (double(d.x) - 1.0) / 2.0;
    auto dist_mm = [&](const ZonalComponent& c) {
      const double dz = (c.centroid[0] - mz) * s.z;
      const double dy = (c.centroid[1] - my) * s.y;
      const double dx = (c.centroid[2] - mx) * s.x;
      return std::sqrt(dz * dz + dy * dy + dx * dx);
    };
    std::size_t best = 0;
    double best_d = dist_mm(comps[0]);
    for (std::size_t k = 1; k < comps.size(); ++k) {
      const double dk = dist_mm(comps[k]);
      if (dk < best_d) {
        best_d = dk;
        best = k;
      }
    }
    ZonalComponent keep = std::move(comps[best]);
    comps.clear();
    comps.push_back(std::move(keep));
  }

  // rule 4: keep the largest survivor (components are size-ordered)
  ZonalMask out(mask.dims(), mask.spacing());
  for (std::int64_t v : comps.front().voxels) {
    out.data()[v] = mask.data()[v];
  }
  return out;
}

inline ZonalMask postprocess_zones(const ZonalMask& mask,
                                   double fov_threshold_mm = 120.0) {
  return postprocess_zones(
      mask, classify_fov(mask.dims(), mask.spacing(), fov_threshold_mm));
}

}  // namespace zmesh
