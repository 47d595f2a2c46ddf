#include <chrono>
#include <cstdio>

#include "zmesh/nn/graph.hpp"
#include "zmesh/rng.hpp"

using namespace zmesh;
using namespace zmesh::nn;
using Clock = std::chrono::steady_clock;

template <typename F>
double time_ms(F&& f, int reps = 20) {
  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) f();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / reps;
}

int main() {
  Rng rng(1);
  auto rnd = [&](std::vector<std::int64_t> dims) {
    Tensor<float> t(dims);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = (float)rng.uniform(-1, 1);
    return t;
  };

  // m33-like 3D conv: 48 -> 8 at (8,32,32)
  auto x = make_input(rnd({48, 8, 32, 32}), true);
  auto w = make_input(rnd({8, 48, 3, 3, 3}), true);
  auto b = make_input(rnd({8}), true);
  const double gflop = 2.0 * 8 * 48 * 27 * 8 * 32 * 32 / 1e9;

  double fwd = time_ms([&] { auto y = conv(x, w, b); });
  std::printf("conv 48->8 3x3x3 @8x32x32: %.2f ms fwd  (%.1f GF/s)\n", fwd,
              gflop / (fwd / 1000.0));

  auto y = conv(x, w, b);
  y->ensure_grad();
  y->grad.fill(1.0f);
  double bwd = time_ms([&] {
    x->zero_grad();
    w->zero_grad();
    b->zero_grad();
    x->ensure_grad();
    w->ensure_grad();
    b->ensure_grad();
    y->backprop();
  });
  std::printf("conv backward: %.2f ms (%.1f GF/s equiv 2x)\n", bwd,
              2.0 * gflop / (bwd / 1000.0));

  // instance_norm + lrelu + softmax at 8ch (8,32,32)
  auto h = make_input(rnd({8, 8, 32, 32}), true);
  auto g = make_input(rnd({8}), true);
  auto s = make_input(rnd({8}), true);
  std::printf("instance_norm fwd: %.2f ms\n", time_ms([&] {
                auto z = instance_norm(h, g, s);
              }));
  std::printf("leaky fwd: %.2f ms\n", time_ms([&] { auto z = leaky_relu(h); }));
  std::printf("softmax fwd (2ch): %.2f ms\n", time_ms([&] {
                auto t2 = make_input(rnd({2, 8, 32, 32}));
                auto z = softmax_channels(t2);
              }));
  std::printf("upsample fwd (16ch 4x16x16 ->x2): %.2f ms\n", time_ms([&] {
                auto t3 = make_input(rnd({16, 4, 16, 16}));
                auto z = linear_upsample(t3, {2, 2, 2});
              }));
  std::printf("concat fwd (48ch @8x32x32): %.2f ms\n", time_ms([&] {
                auto a1 = make_input(rnd({16, 8, 32, 32}));
                auto a2 = make_input(rnd({32, 8, 32, 32}));
                auto z = concat<float>({a1, a2});
              }));
  std::printf("losses (focal+ce @1x8x32x32): %.2f ms\n", time_ms([&] {
                auto p = make_input(rnd({1, 8, 32, 32}));
                for (std::int64_t i = 0; i < p->value.size(); ++i) {
                  p->value[i] = 0.5f + 0.4f * p->value[i];
                }
                Tensor<float> t4({1, 8, 32, 32});
                auto l1 = loss_focal(p, t4, 0.25, 2.0);
                auto l2 = loss_ce(p, t4, 0.5);
              }));
  return 0;
}
