#include <cstdio>

#include "zmesh/mesh.hpp"
#include "zmesh/nn/gradcheck.hpp"
#include "zmesh/rng.hpp"

using namespace zmesh;
using namespace zmesh::nn;

int main() {
  MeshConfig cfg;
  cfg.grid = 3;
  cfg.base_filters = 4;
  cfg.filter_growth = 2;
  cfg.input_channels = 1;
  MeshNetwork<double> net(cfg, 99);

  Tensor<double> in_t({1, 4, 8, 8});
  Rng rng(100);
  for (std::int64_t i = 0; i < in_t.size(); ++i) in_t[i] = rng.uniform(-1, 1);
  auto input = make_input(in_t, true);

  Tensor<double> target({1, 4, 8, 8});
  Rng trng(101);
  for (std::int64_t i = 0; i < target.size(); ++i)
    target[i] = trng.bernoulli(0.3) ? 1.0 : 0.0;

  auto build = [&]() {
    auto out = net.forward(input);
    std::vector<NodeRef<double>> losses;
    std::vector<double> weights;
    losses.push_back(loss_mse(slice_channels(out.final, 1, 1), target));
    weights.push_back(1.0);
    for (const auto& aux : out.aux) {
      Tensor<double> t({1, aux.prob->value.z(), aux.prob->value.y(),
                        aux.prob->value.x()});
      const std::int64_t fz = 4 / aux.prob->value.z();
      const std::int64_t fyx = 8 / aux.prob->value.y();
      for (std::int64_t z = 0; z < t.z(); ++z)
        for (std::int64_t y = 0; y < t.y(); ++y)
          for (std::int64_t x = 0; x < t.x(); ++x)
            t.at(0, z, y, x) = target.at(0, z * fz, y * fyx, x * fyx);
      losses.push_back(loss_mse(slice_channels(aux.prob, 1, 1), t));
      weights.push_back(deep_supervision_weight(aux.i == 3 ? aux.j : aux.i, 3));
    }
    return weighted_sum(losses, weights);
  };

  // analytic
  auto loss = build();
  for (auto& p : net.params()) p.node->zero_grad();
  input->zero_grad();
  backward(loss);

  // brute force every coordinate of every param, find worst
  double worst = 0;
  std::string wid;
  std::int64_t widx = -1;
  double wa = 0, wn = 0, wn2 = 0;
  for (auto& p : net.params()) {
    auto leaf = p.node;
    leaf->ensure_grad();
    for (std::int64_t i = 0; i < leaf->value.size(); ++i) {
      const double v0 = leaf->value[i];
      const double h = 1e-5 * std::max(1.0, std::abs(v0));
      auto central = [&](double step) {
        leaf->value[i] = v0 + step;
        const double up = build()->value[0];
        leaf->value[i] = v0 - step;
        const double dn = build()->value[0];
        leaf->value[i] = v0;
        return (up - dn) / (2.0 * step);
      };
      const double n1 = central(h), n2 = central(h / 2);
      const double dis = std::abs(n1 - n2) / std::max({std::abs(n1), std::abs(n2), 1e-8});
      if (dis > 1e-4) continue;  // kink guard
      const double a = leaf->grad[i];
      const double rel = std::abs(a - n2) / std::max({std::abs(a), std::abs(n2), 1e-8});
      if (rel > worst) {
        worst = rel;
        wid = p.id;
        widx = i;
        wa = a;
        wn = n1;
        wn2 = n2;
      }
      if (i > 40) break;  // keep runtime sane per tensor
    }
  }
  std::printf("worst=%.4e at %s[%lld] analytic=%.10g n_h=%.10g n_h/2=%.10g\n",
              worst, wid.c_str(), (long long)widx, wa, wn, wn2);
  return 0;
}
