#include <chrono>
#include <cstdio>

#include "zmesh/mesh.hpp"
#include "zmesh/nn/graph.hpp"
#include "zmesh/nn/optim.hpp"
#include "zmesh/rng.hpp"
#include "zmesh/train.hpp"

using namespace zmesh;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int main() {
  MeshConfig cfg;
  cfg.grid = 3;
  cfg.base_filters = 8;
  cfg.filter_growth = 8;
  cfg.input_channels = 6;
  MeshNetwork<float> net(cfg, 1);
  std::printf("params: %lld\n", (long long)net.parameter_count());

  Rng rng(2);
  for (Dims3 patch : {Dims3{8, 32, 32}, Dims3{8, 48, 48}, Dims3{12, 96, 96}}) {
    nn::Tensor<float> x({6, patch.z, patch.y, patch.x});
    for (std::int64_t i = 0; i < x.size(); ++i) {
      x[i] = (float)rng.uniform(-1, 1);
    }
    nn::Tensor<float> t({1, patch.z, patch.y, patch.x});
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.bernoulli(0.1);

    // forward only
    auto t0 = Clock::now();
    int reps = 5;
    for (int r = 0; r < reps; ++r) {
      auto out = net.forward(nn::make_input(x), false);
    }
    double fwd = ms_since(t0) / reps;

    // forward+backward with deep supervision
    nn::SgdOptimizer<float> opt(&net.params(), 0.9);
    t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
      opt.zero_grad();
      auto out = net.forward(nn::make_input(x), true);
      auto loss = deep_supervised_loss(out, t, cfg.grid, 0.25, 2.0, 0.5);
      nn::backward(loss);
      opt.step(0.01);
    }
    double step = ms_since(t0) / reps;
    std::printf("patch %lldx%lldx%lld: fwd %.1f ms, train step %.1f ms\n",
                (long long)patch.z, (long long)patch.y, (long long)patch.x,
                fwd, step);
  }
  return 0;
}
