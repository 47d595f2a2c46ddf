#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "zmesh/nn/graph.hpp"
#include "zmesh/nn/optim.hpp"
#include "zmesh/rng.hpp"

namespace zmesh {

// G x G grid of modules. Both grid axes are U-shaped: the level of row or
// column index i is l(i) = min(i, G+1-i) - 1, so it rises toward the middle
// index and falls back to zero. Row transitions move along the 3D axis and
// rescale (Z,Y,X); column transitions are in-plane only and rescale (Y,X).
// A module at (i,j) therefore works at dims (Z/2^l(i), Y/2^(l(i)+l(j)),
// X/2^(l(i)+l(j))) and carries K(D) channels with D(i,j) = l(i)+l(j)+1.
//
// Inside a module all incoming maps (transitions plus mirror skips) are
// concatenated and fed in parallel to a 2D block (two 3x3x1 conv+IN+LReLU
// layers) and a 3D block (two 3x3x3 layers); mixed modules fuse the two
// block outputs with the feature merging unit |a-b|. The last column holds
// 2D-only modules, the last row 3D-only ones (except the shared corner,
// which is mixed).

enum class HeadMode { detect, restore };

struct MeshConfig {
  int grid = 5;
  int base_filters = 32;
  int filter_growth = 16;
  int input_channels = 6;
  int output_classes = 2;    // detect heads
  int restore_channels = 3;  // restoration head width
  HeadMode head_mode = HeadMode::detect;
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
  bool fmu_swapped = false;  // exercises FMU symmetry in tests

  void validate() const {
    if (grid < 3 || grid % 2 == 0) {
      throw std::invalid_argument("MeshConfig: grid must be odd and >= 3");
    }
    if (base_filters <= 0 || filter_growth <= 0) {
      throw std::invalid_argument("MeshConfig: filters must be positive");
    }
    if (input_channels <= 0 || output_classes <= 0 || restore_channels <= 0) {
      throw std::invalid_argument("MeshConfig: channel counts must be positive");
    }
    if (leaky_slope <= 0.0 || leaky_slope >= 1.0 || norm_eps <= 0.0) {
      throw std::invalid_argument("MeshConfig: bad activation/norm constants");
    }
  }
};

/// Level of a 1-based grid index: 0 at the borders, maximal in the middle.
inline int mesh_level(int i, int grid) {
  if (i < 1 || i > grid) throw std::out_of_range("mesh_level: index out of range");
  return std::min(i, grid + 1 - i) - 1;
}

/// Depth of module (i,j); ranges over 1..grid.
inline int mesh_depth(int i, int j, int grid) {
  return mesh_level(i, grid) + mesh_level(j, grid) + 1;
}

/// Filter count at depth D.
inline int mesh_filters(int depth, int base = 32, int growth = 16) {
  if (depth < 1) throw std::out_of_range("mesh_filters: depth must be >= 1");
  return base + growth * (depth - 1);
}

/// Deep-supervision weight for the aux heads in row/column i: (1/2)^(G-i).
inline double deep_supervision_weight(int i, int grid) {
  return std::pow(0.5, double(grid - i));
}

template <typename T>
struct MeshOutput {
  nn::NodeRef<T> final;  // softmax probabilities (detect) or linear (restore)
  struct Aux {
    int i, j;
    int level;  // spatial dims are input dims / 2^level (Z likewise)
    nn::NodeRef<T> prob;
  };
  std::vector<Aux> aux;
};

template <typename T>
class MeshNetwork {
public:
  struct BlockRef {
    int conv_w[2] = {-1, -1}, conv_b[2] = {-1, -1};
    int norm_g[2] = {-1, -1}, norm_s[2] = {-1, -1};
  };

  struct Module {
    int i = 0, j = 0;
    int depth = 0;
    int filters = 0;
    int in_channels = 0;
    bool has_2d = false, has_3d = false;
    BlockRef b2d, b3d;
    int head_w = -1, head_b = -1;
  };

  MeshNetwork(MeshConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    build();
    validate_shapes();
  }

  const MeshConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  int grid() const { return cfg_.grid; }
  int level_max() const { return (cfg_.grid - 1) / 2; }

  std::vector<nn::Param<T>>& params() { return params_; }
  const std::vector<nn::Param<T>>& params() const { return params_; }

  const Module& module(int i, int j) const { return modules_.at(key(i, j)); }
  std::size_t module_count() const { return modules_.size(); }

  int head_count() const {
    int n = 0;
    for (const auto& [k, m] : modules_) n += (m.head_w >= 0) ? 1 : 0;
    return n;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.node->value.size();
    return n;
  }

  /// Spatial divisibility required of inputs: Z by 2^lmax, Y and X by
  /// 2^(2*lmax).
  void check_divisibility(const nn::Tensor<T>& input) const {
    const std::int64_t need_z = std::int64_t(1) << level_max();
    const std::int64_t need_yx = std::int64_t(1) << (2 * level_max());
    if (input.z() % need_z) {
      throw std::invalid_argument("mesh forward: Z=" + std::to_string(input.z()) +
                                  " not divisible by " + std::to_string(need_z));
    }
    if (input.y() % need_yx) {
      throw std::invalid_argument("mesh forward: Y=" + std::to_string(input.y()) +
                                  " not divisible by " + std::to_string(need_yx));
    }
    if (input.x() % need_yx) {
      throw std::invalid_argument("mesh forward: X=" + std::to_string(input.x()) +
                                  " not divisible by " + std::to_string(need_yx));
    }
  }

  MeshOutput<T> forward(const nn::NodeRef<T>& input, bool with_aux = true) {
    if (input->value.rank() != 4 || input->value.c() != cfg_.input_channels) {
      throw std::invalid_argument("mesh forward: expected " +
                                  std::to_string(cfg_.input_channels) +
                                  "-channel 4D input");
    }
    check_divisibility(input->value);
    const int G = cfg_.grid;
    const int mid = (G + 1) / 2;
    std::map<std::pair<int, int>, nn::NodeRef<T>> out;
    MeshOutput<T> result;

    for (int i = 1; i <= G; ++i) {
      for (int j = 1; j <= G; ++j) {
        std::vector<nn::NodeRef<T>> ins;
        if (i == 1 && j == 1) ins.push_back(input);
        if (i > 1) {
          auto up = out.at({i - 1, j});
          ins.push_back(i <= mid ? nn::max_pool(up, {2, 2, 2})
                                 : nn::linear_upsample(up, {2, 2, 2}));
        }
        if (j > 1) {
          auto left = out.at({i, j - 1});
          ins.push_back(j <= mid ? nn::max_pool(left, {1, 2, 2})
                                 : nn::linear_upsample(left, {1, 2, 2}));
        }
        if (i > mid) ins.push_back(out.at({G + 1 - i, j}));  // mirror-row skip
        if (j > mid) ins.push_back(out.at({i, G + 1 - j}));  // mirror-col skip

        auto merged = nn::concat(ins);
        const Module& m = modules_.at(key(i, j));
        nn::NodeRef<T> o2, o3;
        if (m.has_2d) o2 = run_block(m.b2d, merged);
        if (m.has_3d) o3 = run_block(m.b3d, merged);
        nn::NodeRef<T> fused;
        if (m.has_2d && m.has_3d) {
          fused = cfg_.fmu_swapped ? nn::abs_diff(o3, o2) : nn::abs_diff(o2, o3);
        } else {
          fused = m.has_2d ? o2 : o3;
        }
        out[{i, j}] = fused;

        if (m.head_w >= 0) {
          const bool is_final = (i == G && j == G);
          if (!is_final && !with_aux) continue;
          auto logits = nn::conv(fused, params_[m.head_w].node, params_[m.head_b].node);
          if (cfg_.head_mode == HeadMode::restore) {
            result.final = logits;
          } else if (is_final) {
            result.final = nn::softmax_channels(logits);
          } else {
            const int lvl = mesh_level(i, G) + mesh_level(j, G);
            result.aux.push_back({i, j, lvl, nn::softmax_channels(logits)});
          }
        }
      }
    }
    return result;
  }

  /// Structured text dump of the module grid (shapes, channels, totals).
  std::string summary() const {
    std::ostringstream os;
    const int G = cfg_.grid;
    os << "mesh grid " << G << "x" << G << ", " << modules_.size() << " modules, "
       << head_count() << " heads, " << parameter_count() << " parameters\n";
    for (int i = 1; i <= G; ++i) {
      for (int j = 1; j <= G; ++j) {
        const Module& m = modules_.at(key(i, j));
        const int li = mesh_level(i, G), lj = mesh_level(j, G);
        os << "m" << i << j << " kind=";
        os << (m.has_2d && m.has_3d ? "2D+3D" : (m.has_2d ? "2D" : "3D"));
        os << " D=" << m.depth << " K=" << m.filters << " in=" << m.in_channels
           << " dims=Z/" << (1 << li) << ",YX/" << (1 << (li + lj));
        if (m.head_w >= 0) {
          os << (i == G && j == G
                     ? (cfg_.head_mode == HeadMode::restore ? " head=restore"
                                                            : " head=final")
                     : " head=aux");
        }
        os << "\n";
      }
    }
    return os.str();
  }

private:
  static std::pair<int, int> key(int i, int j) { return {i, j}; }

  int add_param(const std::string& id, nn::Tensor<T> value) {
    params_.emplace_back(id, std::move(value));
    return static_cast<int>(params_.size() - 1);
  }

  BlockRef make_block(const std::string& prefix, int in_ch, int out_ch, int kz,
                      Rng& rng) {
    BlockRef b;
    int c = in_ch;
    for (int layer = 0; layer < 2; ++layer) {
      const std::string tag = prefix + ".c" + std::to_string(layer + 1);
      const std::int64_t fan_in = std::int64_t(c) * kz * 3 * 3;
      b.conv_w[layer] = add_param(
          tag + ".w", nn::kaiming_init<T>({out_ch, c, kz, 3, 3}, fan_in,
                                          cfg_.leaky_slope, rng));
      b.conv_b[layer] = add_param(tag + ".b", nn::Tensor<T>({out_ch}));
      nn::Tensor<T> ones({out_ch});
      ones.fill(T(1));
      b.norm_g[layer] = add_param(prefix + ".n" + std::to_string(layer + 1) + ".g",
                                  std::move(ones));
      b.norm_s[layer] = add_param(prefix + ".n" + std::to_string(layer + 1) + ".s",
                                  nn::Tensor<T>({out_ch}));
      c = out_ch;
    }
    return b;
  }

  // kernel depth (3x3x1 vs 3x3x3) is carried by the block's weight shapes
  nn::NodeRef<T> run_block(const BlockRef& b, const nn::NodeRef<T>& in) {
    nn::NodeRef<T> h = in;
    for (int layer = 0; layer < 2; ++layer) {
      h = nn::conv(h, params_[b.conv_w[layer]].node, params_[b.conv_b[layer]].node);
      h = nn::instance_norm(h, params_[b.norm_g[layer]].node,
                            params_[b.norm_s[layer]].node, cfg_.norm_eps);
      h = nn::leaky_relu(h, cfg_.leaky_slope);
    }
    return h;
  }

  void build() {
    const int G = cfg_.grid;
    const int mid = (G + 1) / 2;
    Rng rng(seed_);

    // pass 1: module blocks (identical id/stream layout for every head mode)
    for (int i = 1; i <= G; ++i) {
      for (int j = 1; j <= G; ++j) {
        Module m;
        m.i = i;
        m.j = j;
        m.depth = mesh_depth(i, j, G);
        m.filters = mesh_filters(m.depth, cfg_.base_filters, cfg_.filter_growth);
        m.has_2d = !(i == G && j < G);
        m.has_3d = !(j == G && i < G);

        int in_ch = 0;
        if (i == 1 && j == 1) in_ch += cfg_.input_channels;
        if (i > 1) in_ch += modules_.at(key(i - 1, j)).filters;
        if (j > 1) in_ch += modules_.at(key(i, j - 1)).filters;
        if (i > mid) in_ch += modules_.at(key(G + 1 - i, j)).filters;
        if (j > mid) in_ch += modules_.at(key(i, G + 1 - j)).filters;
        m.in_channels = in_ch;

        const std::string prefix = "m" + std::to_string(i) + "_" + std::to_string(j);
        if (m.has_3d) m.b3d = make_block(prefix + ".b3d", in_ch, m.filters, 3, rng);
        if (m.has_2d) m.b2d = make_block(prefix + ".b2d", in_ch, m.filters, 1, rng);
        modules_.emplace(key(i, j), m);
      }
    }

    // pass 2: output heads (1x1x1 convolutions)
    auto add_head = [&](int i, int j, int out_ch, const std::string& name) {
      Module& m = modules_.at(key(i, j));
      const std::string prefix =
          "head." + name + ".m" + std::to_string(i) + "_" + std::to_string(j);
      m.head_w = add_param(prefix + ".w",
                           nn::kaiming_init<T>({out_ch, m.filters, 1, 1, 1},
                                               m.filters, cfg_.leaky_slope, rng));
      m.head_b = add_param(prefix + ".b", nn::Tensor<T>({out_ch}));
    };
    if (cfg_.head_mode == HeadMode::restore) {
      add_head(G, G, cfg_.restore_channels, "restore");
    } else {
      for (int i = 2; i <= G - 1; ++i) add_head(i, G, cfg_.output_classes, "aux");
      for (int i = 2; i <= G - 1; ++i) add_head(G, i, cfg_.output_classes, "aux");
      add_head(G, G, cfg_.output_classes, "final");
    }
  }

  // Symbolic shape pass: propagate per-axis halving exponents along every
  // edge and skip, and require that all paths into a module agree.
  void validate_shapes() const {
    const int G = cfg_.grid;
    const int mid = (G + 1) / 2;
    struct Sym {
      int ez, eyx;
    };
    std::map<std::pair<int, int>, Sym> sym;
    for (int i = 1; i <= G; ++i) {
      for (int j = 1; j <= G; ++j) {
        const Sym expect{mesh_level(i, G), mesh_level(i, G) + mesh_level(j, G)};
        auto check = [&](Sym got, const char* what) {
          if (got.ez != expect.ez || got.eyx != expect.eyx) {
            throw std::logic_error(std::string("mesh size-consistency violated at m") +
                                   std::to_string(i) + std::to_string(j) + " via " +
                                   what);
          }
        };
        if (i > 1) {
          Sym s = sym.at(key(i - 1, j));
          if (i <= mid) { s.ez += 1; s.eyx += 1; } else { s.ez -= 1; s.eyx -= 1; }
          check(s, "row transition");
        }
        if (j > 1) {
          Sym s = sym.at(key(i, j - 1));
          if (j <= mid) s.eyx += 1; else s.eyx -= 1;
          check(s, "column transition");
        }
        if (i > mid) check(sym.at(key(G + 1 - i, j)), "row skip");
        if (j > mid) check(sym.at(key(i, G + 1 - j)), "column skip");
        sym[key(i, j)] = expect;

        // channel law
        const Module& m = modules_.at(key(i, j));
        if (m.filters != mesh_filters(mesh_depth(i, j, G), cfg_.base_filters,
                                      cfg_.filter_growth)) {
          throw std::logic_error("mesh channel law violated");
        }
      }
    }
  }

  MeshConfig cfg_;
  std::uint64_t seed_;
  std::map<std::pair<int, int>, Module> modules_;
  std::vector<nn::Param<T>> params_;
};

}  // namespace zmesh
