#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "zmesh/nn/checkpoint.hpp"
#include "zmesh/nn/gradcheck.hpp"
#include "zmesh/nn/graph.hpp"
#include "zmesh/nn/optim.hpp"
#include "zmesh/rng.hpp"

using namespace zmesh;
using namespace zmesh::nn;

namespace {

Tensor<double> random_tensor(const std::vector<std::int64_t>& dims,
                             std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(dims);
  Rng rng(seed);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// values bounded away from zero, for kinked activations
Tensor<double> random_tensor_no_kink(const std::vector<std::int64_t>& dims,
                                     std::uint64_t seed, double margin = 0.1) {
  Tensor<double> t = random_tensor(dims, seed, -1.0, 1.0);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < margin) t[i] += (t[i] >= 0 ? margin : -margin);
  }
  return t;
}

}  // namespace

TEST_CASE("conv with an identity kernel reproduces the input") {
  auto x = make_input(random_tensor({1, 3, 5, 5}, 1));
  Tensor<double> w({1, 1, 3, 3, 3});
  w[(1 * 3 + 1) * 3 + 1] = 1.0;  // center tap of the 3x3x3 kernel
  auto wn = make_input(std::move(w));
  auto bn = make_input(Tensor<double>({1}));
  auto y = conv(x, wn, bn);
  for (std::int64_t i = 0; i < y->value.size(); ++i) {
    REQUIRE(y->value[i] == Catch::Approx(x->value[i]).margin(1e-12));
  }
}

TEST_CASE("conv of all-ones 3x3x1 kernel sums the in-plane window") {
  Tensor<double> ones({1, 3, 5, 5});
  ones.fill(1.0);
  auto x = make_input(std::move(ones));
  Tensor<double> w({1, 1, 1, 3, 3});
  w.fill(1.0);
  auto wn = make_input(std::move(w));
  Tensor<double> b({1});
  b[0] = 0.25;
  auto bn = make_input(std::move(b));
  auto y = conv(x, wn, bn);
  REQUIRE(y->value.at(0, 1, 2, 2) == Catch::Approx(9.25));  // interior: 9 + bias
  REQUIRE(y->value.at(0, 1, 0, 0) == Catch::Approx(4.25));  // corner: 4 + bias
}

TEST_CASE("conv rejects channel mismatch") {
  auto x = make_input(random_tensor({2, 2, 4, 4}, 3));
  auto w = make_input(random_tensor({4, 3, 1, 3, 3}, 4));
  auto b = make_input(Tensor<double>({4}));
  REQUIRE_THROWS_AS(conv(x, w, b), std::invalid_argument);
}

TEST_CASE("conv gradients match finite differences") {
  auto x = make_input(random_tensor({2, 3, 6, 5}, 11), true);
  auto w = make_input(random_tensor({3, 2, 3, 3, 3}, 12, -0.5, 0.5), true);
  auto b = make_input(random_tensor({3}, 13), true);
  Tensor<double> target = random_tensor({3, 3, 6, 5}, 14);
  auto build = [&]() { return loss_mse(conv(x, w, b), target); };
  REQUIRE(grad_check({x, w, b}, build) < 1e-4);
}

TEST_CASE("conv with 3x3x1 kernel gradients match finite differences") {
  auto x = make_input(random_tensor({2, 2, 4, 6}, 21), true);
  auto w = make_input(random_tensor({2, 2, 1, 3, 3}, 22, -0.5, 0.5), true);
  auto b = make_input(random_tensor({2}, 23), true);
  Tensor<double> target = random_tensor({2, 2, 4, 6}, 24);
  auto build = [&]() { return loss_mse(conv(x, w, b), target); };
  REQUIRE(grad_check({x, w, b}, build) < 1e-4);
}

TEST_CASE("instance_norm standardizes per channel") {
  auto x = make_input(random_tensor({2, 3, 4, 4}, 31, -2.0, 5.0));
  Tensor<double> g({2});
  g.fill(1.0);
  auto gn = make_input(std::move(g));
  auto sn = make_input(Tensor<double>({2}));
  auto y = instance_norm(x, gn, sn);
  const std::int64_t n = y->value.voxels();
  for (std::int64_t c = 0; c < 2; ++c) {
    double sum = 0;
    for (std::int64_t i = 0; i < n; ++i) sum += y->value[c * n + i];
    REQUIRE(std::abs(sum / double(n)) < 1e-5);
  }
}

TEST_CASE("instance_norm maps a constant channel to the shift") {
  Tensor<double> cv({1, 2, 3, 3});
  cv.fill(4.2);
  auto x = make_input(std::move(cv));
  Tensor<double> g({1});
  g[0] = 2.0;
  auto gn = make_input(std::move(g));
  Tensor<double> s({1});
  s[0] = -0.7;
  auto sn = make_input(std::move(s));
  auto y = instance_norm(x, gn, sn);
  for (std::int64_t i = 0; i < y->value.size(); ++i) {
    REQUIRE(y->value[i] == Catch::Approx(-0.7).margin(1e-12));
  }
}

TEST_CASE("instance_norm gradients match finite differences") {
  auto x = make_input(random_tensor({2, 2, 4, 3}, 41, -1.0, 2.0), true);
  auto g = make_input(random_tensor({2}, 42, 0.5, 1.5), true);
  auto s = make_input(random_tensor({2}, 43), true);
  Tensor<double> target = random_tensor({2, 2, 4, 3}, 44);
  auto build = [&]() { return loss_mse(instance_norm(x, g, s), target); };
  REQUIRE(grad_check({x, g, s}, build) < 1e-4);
}

TEST_CASE("leaky_relu values and gradient") {
  Tensor<double> v({1, 1, 1, 2});
  v[0] = 2.0;
  v[1] = -2.0;
  auto x = make_input(std::move(v));
  auto y = leaky_relu(x, 0.01);
  REQUIRE(y->value[0] == 2.0);
  REQUIRE(y->value[1] == Catch::Approx(-0.02));

  auto xg = make_input(random_tensor_no_kink({2, 3, 4, 4}, 51), true);
  Tensor<double> target = random_tensor({2, 3, 4, 4}, 52);
  auto build = [&]() { return loss_mse(leaky_relu(xg, 0.01), target); };
  REQUIRE(grad_check({xg}, build) < 1e-4);
}

TEST_CASE("max_pool shape law and window maximum") {
  auto x = make_input(random_tensor({1, 4, 4, 4}, 61));
  auto y = max_pool(x, {1, 2, 2});
  REQUIRE(y->value.dims() == std::vector<std::int64_t>{1, 4, 2, 2});

  Tensor<double> v({1, 1, 2, 2});
  v[0] = 1;
  v[1] = 2;
  v[2] = 3;
  v[3] = 4;
  auto x2 = make_input(std::move(v));
  auto y2 = max_pool(x2, {1, 2, 2});
  REQUIRE(y2->value[0] == 4.0);

  auto x3 = make_input(random_tensor({1, 4, 5, 6}, 62));
  REQUIRE_THROWS_AS(max_pool(x3, {1, 2, 2}), std::invalid_argument);
}

TEST_CASE("max_pool gradient routes to the argmax") {
  auto x = make_input(random_tensor({2, 2, 4, 4}, 63), true);
  Tensor<double> target = random_tensor({2, 1, 2, 2}, 64);
  auto build = [&]() { return loss_mse(max_pool(x, {2, 2, 2}), target); };
  REQUIRE(grad_check({x}, build) < 1e-4);
}

TEST_CASE("linear_upsample reproduces the stated sampling formula") {
  SECTION("unit factors are the identity") {
    auto x = make_input(random_tensor({2, 2, 3, 3}, 71));
    auto y = linear_upsample(x, {1, 1, 1});
    REQUIRE(y->value == x->value);
  }
  SECTION("constant volume stays constant") {
    Tensor<double> cv({1, 2, 2, 2});
    cv.fill(3.3);
    auto x = make_input(std::move(cv));
    auto y = linear_upsample(x, {2, 2, 2});
    for (std::int64_t i = 0; i < y->value.size(); ++i) {
      REQUIRE(y->value[i] == Catch::Approx(3.3).margin(1e-12));
    }
  }
  SECTION("two-voxel ramp doubled along X") {
    Tensor<double> v({1, 1, 1, 2});
    v[0] = 0.0;
    v[1] = 1.0;
    auto x = make_input(std::move(v));
    auto y = linear_upsample(x, {1, 1, 2});
    REQUIRE(y->value[0] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(y->value[1] == Catch::Approx(0.25));
    REQUIRE(y->value[2] == Catch::Approx(0.75));
    REQUIRE(y->value[3] == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("gradient") {
    auto x = make_input(random_tensor({2, 2, 3, 3}, 72), true);
    Tensor<double> target = random_tensor({2, 4, 6, 6}, 73);
    auto build = [&]() { return loss_mse(linear_upsample(x, {2, 2, 2}), target); };
    REQUIRE(grad_check({x}, build) < 1e-4);
  }
}

TEST_CASE("abs_diff is symmetric and zero on itself") {
  auto a = make_input(random_tensor({2, 2, 3, 3}, 81));
  auto b = make_input(random_tensor({2, 2, 3, 3}, 82));
  auto d1 = abs_diff(a, b);
  auto d2 = abs_diff(b, a);
  REQUIRE(d1->value == d2->value);

  auto dz = abs_diff(a, a);
  for (std::int64_t i = 0; i < dz->value.size(); ++i) REQUIRE(dz->value[i] == 0.0);
}

TEST_CASE("abs_diff gradient away from equality") {
  auto a = make_input(random_tensor({1, 2, 3, 3}, 83), true);
  auto b0 = random_tensor({1, 2, 3, 3}, 84);
  // keep |a-b| bounded away from the kink
  for (std::int64_t i = 0; i < b0.size(); ++i) {
    if (std::abs(a->value[i] - b0[i]) < 0.1) b0[i] += 0.25;
  }
  auto b = make_input(std::move(b0), true);
  Tensor<double> target = random_tensor({1, 2, 3, 3}, 85);
  auto build = [&]() { return loss_mse(abs_diff(a, b), target); };
  REQUIRE(grad_check({a, b}, build) < 1e-4);
}

TEST_CASE("softmax_channels normalizes and ignores per-voxel shifts") {
  Tensor<double> logits({2, 1, 1, 1});
  logits[0] = 0.0;
  logits[1] = 0.0;
  auto x = make_input(std::move(logits));
  auto p = softmax_channels(x);
  REQUIRE(p->value[0] == Catch::Approx(0.5));
  REQUIRE(p->value[1] == Catch::Approx(0.5));

  auto x2 = make_input(random_tensor({3, 2, 3, 3}, 91, -2, 2));
  auto p2 = softmax_channels(x2);
  const std::int64_t n = p2->value.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::int64_t c = 0; c < 3; ++c) sum += p2->value[c * n + i];
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }

  // adding a per-voxel constant to every channel leaves the output unchanged
  Tensor<double> shifted = x2->value;
  Rng rng(92);
  std::vector<double> offs(static_cast<std::size_t>(n));
  for (auto& o : offs) o = rng.uniform(-5.0, 5.0);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < n; ++i) {
      shifted[c * n + i] += offs[static_cast<std::size_t>(i)];
    }
  }
  auto p3 = softmax_channels(make_input(std::move(shifted)));
  for (std::int64_t i = 0; i < p3->value.size(); ++i) {
    REQUIRE(p3->value[i] == Catch::Approx(p2->value[i]).margin(1e-9));
  }
}

TEST_CASE("softmax + slice gradients match finite differences") {
  auto x = make_input(random_tensor({2, 2, 3, 3}, 93), true);
  Tensor<double> target = random_tensor({1, 2, 3, 3}, 94, 0.0, 1.0);
  auto build = [&]() {
    return loss_mse(slice_channels(softmax_channels(x), 1, 1), target);
  };
  REQUIRE(grad_check({x}, build) < 1e-4);
}

TEST_CASE("concat stacks channels and splits gradients") {
  auto a = make_input(random_tensor({1, 2, 2, 2}, 95), true);
  auto b = make_input(random_tensor({2, 2, 2, 2}, 96), true);
  auto c = concat<double>({a, b});
  REQUIRE(c->value.c() == 3);
  REQUIRE(c->value[0] == a->value[0]);
  Tensor<double> target = random_tensor({3, 2, 2, 2}, 97);
  auto build = [&]() { return loss_mse(concat<double>({a, b}), target); };
  REQUIRE(grad_check({a, b}, build) < 1e-4);
}

TEST_CASE("loss_mse values and gradient law") {
  auto p = make_input(random_tensor({1, 2, 2, 2}, 101), true);
  Tensor<double> t = p->value;
  REQUIRE(loss_mse(p, t)->value[0] == 0.0);

  Tensor<double> t2 = p->value;
  for (std::int64_t i = 0; i < t2.size(); ++i) t2[i] -= 2.0;
  REQUIRE(loss_mse(p, t2)->value[0] == Catch::Approx(4.0));

  auto loss = loss_mse(p, t2);
  backward(loss);
  const double n = double(p->value.size());
  for (std::int64_t i = 0; i < p->value.size(); ++i) {
    REQUIRE(p->grad[i] == Catch::Approx(2.0 * (p->value[i] - t2[i]) / n));
  }
}

TEST_CASE("loss_ce matches a scalar-loop oracle") {
  const double beta = 0.37;
  auto p = make_input(random_tensor({2, 2, 3, 3}, 111, 0.05, 0.95), true);
  Tensor<double> t({2, 2, 3, 3});
  Rng rng(112);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;

  double oracle = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double y = t[i], q = p->value[i];
    oracle += beta * y * std::log(q) + (1 - beta) * (1 - y) * std::log(1 - q);
  }
  oracle = -oracle / double(t.size());
  REQUIRE(loss_ce(p, t, beta)->value[0] == Catch::Approx(oracle).epsilon(1e-10));

  SECTION("exact prediction gives near-zero loss") {
    auto exact = make_input(t);
    REQUIRE(loss_ce(exact, t, 0.5)->value[0] < 1e-6);
  }
  SECTION("half-confidence positive at beta 1/2") {
    Tensor<double> hp({1, 1, 1, 1});
    hp[0] = 0.5;
    Tensor<double> ht({1, 1, 1, 1});
    ht[0] = 1.0;
    auto hn = make_input(std::move(hp));
    REQUIRE(loss_ce(hn, ht, 0.5)->value[0] == Catch::Approx(0.5 * std::log(2.0)));
  }
  SECTION("gradient") {
    auto build = [&]() { return loss_ce(p, t, beta); };
    REQUIRE(grad_check({p}, build) < 1e-4);
  }
}

TEST_CASE("loss_focal matches a scalar-loop oracle and downweights easy cases") {
  const double alpha = 0.25, gamma = 2.0;
  auto p = make_input(random_tensor({1, 2, 4, 4}, 121, 0.05, 0.95), true);
  Tensor<double> t({1, 2, 4, 4});
  Rng rng(122);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;

  double oracle = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double y = t[i], q = p->value[i];
    oracle += alpha * std::pow(1 - q, gamma) * y * std::log(q) +
              (1 - alpha) * std::pow(q, gamma) * (1 - y) * std::log(1 - q);
  }
  oracle = -oracle / double(t.size());
  REQUIRE(loss_focal(p, t, alpha, gamma)->value[0] ==
          Catch::Approx(oracle).epsilon(1e-10));

  SECTION("easy positive contributes vanishing loss") {
    Tensor<double> hp({1, 1, 1, 1});
    hp[0] = 1.0 - 1e-6;
    Tensor<double> ht({1, 1, 1, 1});
    ht[0] = 1.0;
    auto hn = make_input(std::move(hp));
    REQUIRE(loss_focal(hn, ht, 0.25, 2.0)->value[0] < 1e-11);
  }
  SECTION("gamma=0 reduces to cross-entropy") {
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
      auto q = make_input(random_tensor({1, 2, 3, 3}, 300 + trial, 0.02, 0.98));
      Tensor<double> tt({1, 2, 3, 3});
      Rng r2(400 + trial);
      for (std::int64_t i = 0; i < tt.size(); ++i) tt[i] = r2.bernoulli(0.5);
      const double c = 0.1 + 0.08 * double(trial % 10);
      const double f = loss_focal(q, tt, c, 0.0)->value[0];
      const double ce = loss_ce(q, tt, c)->value[0];
      REQUIRE(std::abs(f - ce) < 1e-10);
    }
  }
  SECTION("gradient") {
    auto build = [&]() { return loss_focal(p, t, alpha, gamma); };
    REQUIRE(grad_check({p}, build) < 1e-4);
  }
}

TEST_CASE("weighted_sum aggregates scalar losses") {
  auto a = make_input(random_tensor({1, 1, 2, 2}, 131, 0.1, 0.9), true);
  Tensor<double> t = random_tensor({1, 1, 2, 2}, 132, 0.0, 1.0);
  auto build = [&]() {
    auto l1 = loss_mse(a, t);
    auto l2 = loss_ce(a, t, 0.5);
    return weighted_sum<double>({l1, l2}, {1.0, 0.25});
  };
  auto loss = build();
  REQUIRE(loss->value[0] ==
          Catch::Approx(loss_mse(a, t)->value[0] + 0.25 * loss_ce(a, t, 0.5)->value[0]));
  REQUIRE(grad_check({a}, build) < 1e-4);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  auto x = make_input(random_tensor({1, 1, 2, 2}, 141), true);
  // doubles the input but claims gradient 1 instead of 2
  auto bad_double = [](const NodeRef<double>& in) {
    Tensor<double> out(in->value.dims());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 2.0 * in->value[i];
    auto n = std::make_shared<Node<double>>(std::move(out), true);
    n->parents = {in};
    Node<double>* self = n.get();
    Node<double>* parent = in.get();
    n->backprop = [self, parent]() {
      parent->ensure_grad();
      for (std::int64_t i = 0; i < self->grad.size(); ++i) {
        parent->grad[i] += self->grad[i];  // wrong on purpose
      }
    };
    return n;
  };
  Tensor<double> target = random_tensor({1, 1, 2, 2}, 142);
  auto build = [&]() { return loss_mse(bad_double(x), target); };
  REQUIRE(grad_check({x}, build) >= 1e-1);
}

TEST_CASE("sgd step with zero momentum is plain gradient descent") {
  std::vector<Param<double>> params;
  params.emplace_back("p", Tensor<double>::scalar(1.0));
  SgdOptimizer<double> opt(&params, 0.0);
  params[0].node->ensure_grad();
  params[0].node->grad[0] = 0.5;
  opt.step(0.1);
  REQUIRE(params[0].node->value[0] == Catch::Approx(1.0 - 0.1 * 0.5));
}

TEST_CASE("sgd momentum accumulates the velocity buffer") {
  std::vector<Param<double>> params;
  params.emplace_back("p", Tensor<double>::scalar(0.0));
  SgdOptimizer<double> opt(&params, 0.9);
  params[0].node->ensure_grad();
  params[0].node->grad[0] = 1.0;
  opt.step(1.0);  // buf = 1, p = -1
  REQUIRE(params[0].node->value[0] == Catch::Approx(-1.0));
  opt.step(1.0);  // buf = 0.9 + 1 = 1.9, p = -2.9
  REQUIRE(params[0].node->value[0] == Catch::Approx(-2.9));
}

TEST_CASE("learning-rate schedules") {
  auto poly = LrSchedule::poly_policy(0.01, 100);
  REQUIRE(poly.lr(0) == Catch::Approx(0.01));
  REQUIRE(poly.lr(100) == 0.0);
  REQUIRE(poly.lr(50) == Catch::Approx(0.005));

  auto step = LrSchedule::step_policy(0.1, 0.5, 10);
  REQUIRE(step.lr(0) == Catch::Approx(0.1));
  REQUIRE(step.lr(9) == Catch::Approx(0.1));
  REQUIRE(step.lr(10) == Catch::Approx(0.05));
  REQUIRE(step.lr(25) == Catch::Approx(0.025));
}

TEST_CASE("checkpoint round trip preserves values, momenta, and rng state") {
  std::filesystem::create_directories("/tmp/zmesh_tests");
  std::vector<Param<float>> params;
  Rng rng(7);
  params.emplace_back("a.w", [&] {
    Tensor<float> t({2, 3});
    for (std::int64_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<float>(rng.uniform(-1, 1));
    }
    return t;
  }());
  params.emplace_back("a.b", Tensor<float>({3}));
  params[0].momentum[0] = 0.125f;

  Checkpoint ck = make_checkpoint(params, rng.save_state());
  const std::string path = "/tmp/zmesh_tests/ck.zckpt";
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.rng_state == ck.rng_state);
  REQUIRE(back.entries.size() == 2);
  REQUIRE(back.entries[0].id == "a.w");
  REQUIRE(back.entries[0].values == ck.entries[0].values);
  REQUIRE(back.entries[0].momentum == ck.entries[0].momentum);

  // byte-identical re-serialization
  save_checkpoint(back, path + "2");
  std::ifstream f1(path, std::ios::binary), f2(path + "2", std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  REQUIRE(b1 == b2);

  std::vector<Param<float>> fresh;
  fresh.emplace_back("a.w", Tensor<float>({2, 3}));
  fresh.emplace_back("a.b", Tensor<float>({3}));
  REQUIRE(load_into(fresh, back, true) == 2);
  REQUIRE(fresh[0].node->value == params[0].node->value);
  REQUIRE(fresh[0].momentum == params[0].momentum);
}
