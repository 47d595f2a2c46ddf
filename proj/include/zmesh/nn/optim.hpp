#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/nn/graph.hpp"
#include "zmesh/rng.hpp"

namespace zmesh::nn {

/// Trainable tensor with a persistent identifier and its momentum buffer.
template <typename T>
struct Param {
  NodeRef<T> node;
  std::string id;
  Tensor<T> momentum;

  Param(std::string id_, Tensor<T> value)
      : node(make_input(std::move(value), true)),
        id(std::move(id_)),
        momentum(node->value.dims()) {}
};

/// Kaiming fan-in initialization matched to the LeakyReLU slope.
template <typename T>
Tensor<T> kaiming_init(const std::vector<std::int64_t>& dims, std::int64_t fan_in,
                       double leaky_slope, Rng& rng) {
  Tensor<T> t(dims);
  const double gain = std::sqrt(2.0 / (1.0 + leaky_slope * leaky_slope));
  const double stddev = gain / std::sqrt(double(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.normal(0.0, stddev));
  }
  return t;
}

/// SGD with classical momentum: buf <- m*buf + grad; p <- p - lr*buf.
template <typename T>
class SgdOptimizer {
public:
  SgdOptimizer(std::vector<Param<T>>* params, double momentum)
      : params_(params), momentum_(momentum) {
    if (momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("SgdOptimizer: momentum in [0,1)");
    }
  }

  void zero_grad() {
    for (auto& p : *params_) p.node->zero_grad();
  }

  void step(double lr) {
    if (lr <= 0.0) throw std::invalid_argument("SgdOptimizer: lr must be positive");
    const T m = static_cast<T>(momentum_);
    const T rate = static_cast<T>(lr);
    for (auto& p : *params_) {
      if (p.node->grad.empty()) continue;
      T* buf = p.momentum.data();
      const T* g = p.node->grad.data();
      T* v = p.node->value.data();
      const std::int64_t n = p.node->value.size();
      for (std::int64_t i = 0; i < n; ++i) {
        buf[i] = m * buf[i] + g[i];
        v[i] -= rate * buf[i];
      }
    }
  }

  double momentum() const { return momentum_; }

private:
  std::vector<Param<T>>* params_;
  double momentum_;
};

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

enum class ScheduleKind { step, poly };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::step;
  double lr0 = 0.1;
  double gamma = 0.5;   // step: multiplicative decay
  int step_size = 10;   // step: epochs per decay
  int epoch_max = 100;  // poly horizon

  static LrSchedule step_policy(double lr0, double gamma = 0.5, int step_size = 10) {
    return {ScheduleKind::step, lr0, gamma, step_size, 0};
  }
  static LrSchedule poly_policy(double lr0, int epoch_max) {
    return {ScheduleKind::poly, lr0, 0.0, 0, epoch_max};
  }

  double lr(int epoch) const {
    if (epoch < 0) throw std::invalid_argument("LrSchedule: negative epoch");
    if (kind == ScheduleKind::step) {
      return lr0 * std::pow(gamma, double(epoch / step_size));
    }
    if (epoch > epoch_max) throw std::invalid_argument("LrSchedule: epoch > epoch_max");
    return lr0 * (1.0 - double(epoch) / double(epoch_max));
  }
};

}  // namespace zmesh::nn
