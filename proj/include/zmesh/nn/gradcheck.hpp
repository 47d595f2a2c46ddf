#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "zmesh/nn/graph.hpp"
#include "zmesh/rng.hpp"

namespace zmesh::nn {

struct GradCheckOptions {
  double eps = 1e-5;              // relative FD step
  std::int64_t max_coords = 64;   // per tensor; all coords when size fits
  std::uint64_t seed = 17;
  // Piecewise-smooth activations (LReLU, |a-b|, max-pool) kink somewhere in
  // a deep graph for almost any parameter; a finite-difference step that
  // crosses such a kink measures the wrong one-sided slope. Estimates at h
  // and h/2 agree on smooth stretches and disagree across a kink, so
  // disagreeing coordinates are discarded, which is the "resample away from
  // kinks" precondition. A wrong backward rule is still caught: both numeric
  // estimates agree with each other and contradict the analytic value.
  bool kink_guard = true;
  double kink_tol = 1e-4;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;  // kink-adjacent samples
};

/// Central finite-difference check at double precision. `build` must
/// reconstruct the scalar loss from the leaves' current values on every
/// call. Returns the max over sampled coordinates of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport grad_check_report(
    const std::vector<NodeRef<double>>& leaves,
    const std::function<NodeRef<double>()>& build, GradCheckOptions opt = {}) {
  auto loss = build();
  for (const auto& leaf : leaves) leaf->zero_grad();
  backward(loss);

  std::vector<Tensor<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    leaf->ensure_grad();
    analytic.push_back(leaf->grad);
  }

  Rng rng(opt.seed);
  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::int64_t n = leaf->value.size();
    std::vector<std::int64_t> coords;
    if (n <= opt.max_coords) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < opt.max_coords; ++i) {
        coords.push_back(rng.uniform_int(0, n - 1));
      }
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (std::int64_t i : coords) {
      const double v0 = leaf->value[i];
      const double h = opt.eps * std::max(1.0, std::abs(v0));
      auto central = [&](double step) {
        leaf->value[i] = v0 + step;
        const double up = build()->value[0];
        leaf->value[i] = v0 - step;
        const double dn = build()->value[0];
        leaf->value[i] = v0;
        return (up - dn) / (2.0 * step);
      };
      auto estimate = [&](double step) -> std::optional<double> {
        double numeric = central(step);
        if (opt.kink_guard) {
          const double numeric_half = central(step / 2.0);
          const double disagreement =
              std::abs(numeric - numeric_half) /
              std::max({std::abs(numeric), std::abs(numeric_half), 1e-8});
          if (disagreement > opt.kink_tol) return std::nullopt;
          numeric = numeric_half;
        }
        return numeric;
      };
      auto est = estimate(h);
      if (!est) {
        ++report.coords_skipped;
        continue;
      }
      double numeric = *est;
      const double a0 = analytic[li][i];
      if (std::abs(numeric) < 1e-7 && std::abs(a0) < 1e-7) {
        // near-zero derivative: the difference quotient is dominated by
        // rounding noise ~ eps_mach*|loss|/h, so re-probe with a larger step
        if (auto wide = estimate(h * 100.0)) numeric = *wide;
      }
      ++report.coords_checked;
      const double a = analytic[li][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, rel);
    }
  }
  return report;
}

inline double grad_check(const std::vector<NodeRef<double>>& leaves,
                         const std::function<NodeRef<double>()>& build,
                         GradCheckOptions opt = {}) {
  return grad_check_report(leaves, build, opt).max_rel_err;
}

}  // namespace zmesh::nn
