#pragma once

#include <cstdint>
#include <vector>

#include "zmesh/volume.hpp"

namespace zmesh {

/// 26-connected components over the voxels selected by `inside(linear_index)`.
/// Components are discovered in scan order; each voxel list is sorted.
template <typename Pred>
std::vector<std::vector<std::int64_t>> connected_components_26(Dims3 dims,
                                                               Pred inside) {
  const std::int64_t n = dims.voxels();
  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<std::int64_t>> components;
  std::vector<std::int64_t> stack;
  for (std::int64_t seed = 0; seed < n; ++seed) {
    if (visited[static_cast<std::size_t>(seed)] || !inside(seed)) continue;
    std::vector<std::int64_t> comp;
    stack.clear();
    stack.push_back(seed);
    visited[static_cast<std::size_t>(seed)] = 1;
    while (!stack.empty()) {
      const std::int64_t v = stack.back();
      stack.pop_back();
      comp.push_back(v);
      const std::int64_t z = v / (dims.y * dims.x);
      const std::int64_t rem = v % (dims.y * dims.x);
      const std::int64_t y = rem / dims.x;
      const std::int64_t x = rem % dims.x;
      for (std::int64_t dz = -1; dz <= 1; ++dz) {
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            if (!dz && !dy && !dx) continue;
            const std::int64_t nz = z + dz, ny = y + dy, nx = x + dx;
            if (nz < 0 || nz >= dims.z || ny < 0 || ny >= dims.y || nx < 0 ||
                nx >= dims.x) {
              continue;
            }
            const std::int64_t u = (nz * dims.y + ny) * dims.x + nx;
            if (!visited[static_cast<std::size_t>(u)] && inside(u)) {
              visited[static_cast<std::size_t>(u)] = 1;
              stack.push_back(u);
            }
          }
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    components.push_back(std::move(comp));
  }
  return components;
}

inline std::array<double, 3> component_centroid(
    const std::vector<std::int64_t>& voxels, Dims3 dims) {
  double cz = 0, cy = 0, cx = 0;
  for (std::int64_t v : voxels) {
    cz += double(v / (dims.y * dims.x));
    cy += double((v / dims.x) % dims.y);
    cx += double(v % dims.x);
  }
  const double n = double(voxels.size());
  return {cz / n, cy / n, cx / n};
}

}  // namespace zmesh
