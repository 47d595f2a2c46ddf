#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "zmesh/nn/tensor.hpp"
#include "zmesh/parallel.hpp"

namespace zmesh::nn {

// Reverse-mode tape. Each operator call appends a node; creation order is a
// topological order, so backward() walks nodes by descending sequence number
// and visits each exactly once. Closures capture raw parent pointers; the
// parents vector keeps them alive.

template <typename T>
struct Node;

template <typename T>
using NodeRef = std::shared_ptr<Node<T>>;

namespace detail {
inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  std::vector<NodeRef<T>> parents;
  std::function<void()> backprop;
  bool requires_grad = false;
  std::uint64_t seq;

  explicit Node(Tensor<T> v, bool rg)
      : value(std::move(v)), requires_grad(rg), seq(detail::next_seq()) {}

  void ensure_grad() {
    if (grad.empty()) grad = Tensor<T>(value.dims());
  }

  void zero_grad() {
    if (!grad.empty()) grad.fill(T(0));
  }
};

template <typename T>
NodeRef<T> make_input(Tensor<T> value, bool requires_grad = false) {
  return std::make_shared<Node<T>>(std::move(value), requires_grad);
}

namespace detail {

template <typename T>
NodeRef<T> make_op(Tensor<T> value, std::vector<NodeRef<T>> parents) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node<T>>(std::move(value), rg);
  n->parents = std::move(parents);
  return n;
}

template <typename T>
void require_4d(const NodeRef<T>& n, const char* op) {
  if (n->value.rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected 4D (C,Z,Y,X) input");
  }
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss node.
template <typename T>
void backward(const NodeRef<T>& loss) {
  if (loss->value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar");
  }
  loss->ensure_grad();
  loss->grad[0] = T(1);

  // collect reachable nodes (iterative DFS)
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
  for (Node<T>* n : order) {
    if (n->backprop) n->backprop();
  }
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero padding that preserves spatial dims)
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range along one axis for a kernel offset d: indices i with
// 0 <= i + d < extent.
struct AxisRange {
  std::int64_t lo, hi;
};

inline AxisRange conv_range(std::int64_t extent, std::int64_t d) {
  return {std::max<std::int64_t>(0, -d), std::min(extent, extent - d)};
}

// Fixed-order blocked dot product: deterministic (lane layout is constant)
// and wide enough for the vectorizer, unlike a bare scalar reduction.
template <typename T>
T blocked_dot(const T* __restrict__ a, const T* __restrict__ b, std::int64_t n) {
  constexpr std::int64_t kLanes = 16;
  T lanes[kLanes] = {};
  std::int64_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::int64_t l = 0; l < kLanes; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  T sum = tail;
  for (std::int64_t l = 0; l < kLanes; ++l) sum += lanes[l];
  return sum;
}

}  // namespace detail

/// 3D cross-correlation with odd kernel dims in {1,3} per axis; weights are
/// (Cout, Cin, KZ, KY, KX), bias (Cout). Output spatial dims equal input's.
template <typename T>
NodeRef<T> conv(const NodeRef<T>& x, const NodeRef<T>& w, const NodeRef<T>& b) {
  detail::require_4d(x, "conv");
  if (w->value.rank() != 5) throw std::invalid_argument("conv: weights must be 5D");
  const std::int64_t cout = w->value.dim(0), cin = w->value.dim(1);
  const std::int64_t kz = w->value.dim(2), ky = w->value.dim(3), kx = w->value.dim(4);
  if (cin != x->value.c()) {
    throw std::invalid_argument("conv: input channels " +
                                std::to_string(x->value.c()) +
                                " do not match weight channels " +
                                std::to_string(cin));
  }
  for (std::int64_t k : {kz, ky, kx}) {
    if (k != 1 && k != 3) throw std::invalid_argument("conv: kernel dims must be 1 or 3");
  }
  if (b->value.size() != cout) throw std::invalid_argument("conv: bias size mismatch");

  const std::int64_t Z = x->value.z(), Y = x->value.y(), X = x->value.x();
  const std::int64_t pz = (kz - 1) / 2, py = (ky - 1) / 2, px = (kx - 1) / 2;

  Tensor<T> out({cout, Z, Y, X});
  const T* xd = x->value.data();
  const T* wd = w->value.data();
  const T* bd = b->value.data();
  T* od = out.data();
  const std::int64_t plane = Y * X, vol = Z * plane;

  // Tap-sweep layout: per (ci, kernel tap), stream an axpy over the whole
  // valid region. The output channel stays cache-resident across taps.
  parallel_for(cout, [&](std::int64_t co) {
    T* oc = od + co * vol;
    std::fill(oc, oc + vol, bd[co]);
    const T* wbase = wd + co * cin * kz * ky * kx;
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const T* xc = xd + ci * vol;
      const T* wk = wbase + ci * kz * ky * kx;
      for (std::int64_t a = 0; a < kz; ++a) {
        const std::int64_t dz = a - pz;
        const auto rz = detail::conv_range(Z, dz);
        for (std::int64_t bi = 0; bi < ky; ++bi) {
          const std::int64_t dy = bi - py;
          const auto ry = detail::conv_range(Y, dy);
          for (std::int64_t ck = 0; ck < kx; ++ck) {
            const std::int64_t dx = ck - px;
            const auto rx = detail::conv_range(X, dx);
            const T wv = wk[(a * ky + bi) * kx + ck];
            const std::int64_t n = rx.hi - rx.lo;
            for (std::int64_t z = rz.lo; z < rz.hi; ++z) {
              for (std::int64_t y = ry.lo; y < ry.hi; ++y) {
                const T* __restrict__ src =
                    xc + (z + dz) * plane + (y + dy) * X + rx.lo + dx;
                T* __restrict__ dst = oc + z * plane + y * X + rx.lo;
                for (std::int64_t i = 0; i < n; ++i) dst[i] += wv * src[i];
              }
            }
          }
        }
      }
    }
  });

  auto node = detail::make_op<T>(std::move(out), {x, w, b});
  Node<T>* xn = x.get();
  Node<T>* wn = w.get();
  Node<T>* bn = b.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    const Tensor<T>& g = self->grad;
    const T* gd = g.data();
    if (bn->requires_grad) {
      bn->ensure_grad();
      T* db = bn->grad.data();
      for (std::int64_t co = 0; co < cout; ++co) {
        T acc = T(0);
        const T* gc = gd + co * vol;
        for (std::int64_t i = 0; i < vol; ++i) acc += gc[i];
        db[co] += acc;
      }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* dw = wn->grad.data();
      const T* xv = xn->value.data();
      parallel_for(cout, [&](std::int64_t co) {
        const T* gc = gd + co * vol;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const T* xc = xv + ci * vol;
          T* dwk = dw + (co * cin + ci) * kz * ky * kx;
          for (std::int64_t a = 0; a < kz; ++a) {
            const std::int64_t dz = a - pz;
            const auto rz = detail::conv_range(Z, dz);
            for (std::int64_t bi = 0; bi < ky; ++bi) {
              const std::int64_t dy = bi - py;
              const auto ry = detail::conv_range(Y, dy);
              for (std::int64_t ck = 0; ck < kx; ++ck) {
                const std::int64_t dx = ck - px;
                const auto rx = detail::conv_range(X, dx);
                T acc = T(0);
                for (std::int64_t z = rz.lo; z < rz.hi; ++z) {
                  for (std::int64_t y = ry.lo; y < ry.hi; ++y) {
                    acc += detail::blocked_dot(
                        gc + z * plane + y * X + rx.lo,
                        xc + (z + dz) * plane + (y + dy) * X + rx.lo + dx,
                        rx.hi - rx.lo);
                  }
                }
                dwk[(a * ky + bi) * kx + ck] += acc;
              }
            }
          }
        }
      });
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* dx0 = xn->grad.data();
      const T* wv0 = wn->value.data();
      // scatter form mirroring the forward sweep; per-ci slabs are disjoint
      parallel_for(cin, [&](std::int64_t ci) {
        T* dxc = dx0 + ci * vol;
        for (std::int64_t co = 0; co < cout; ++co) {
          const T* gc = gd + co * vol;
          const T* wk = wv0 + (co * cin + ci) * kz * ky * kx;
          for (std::int64_t a = 0; a < kz; ++a) {
            const std::int64_t dz = a - pz;
            const auto rz = detail::conv_range(Z, dz);
            for (std::int64_t bi = 0; bi < ky; ++bi) {
              const std::int64_t dy = bi - py;
              const auto ry = detail::conv_range(Y, dy);
              for (std::int64_t ck = 0; ck < kx; ++ck) {
                const std::int64_t dx = ck - px;
                const auto rx = detail::conv_range(X, dx);
                const T wv = wk[(a * ky + bi) * kx + ck];
                const std::int64_t n = rx.hi - rx.lo;
                for (std::int64_t z = rz.lo; z < rz.hi; ++z) {
                  for (std::int64_t y = ry.lo; y < ry.hi; ++y) {
                    T* __restrict__ dst =
                        dxc + (z + dz) * plane + (y + dy) * X + rx.lo + dx;
                    const T* __restrict__ src = gc + z * plane + y * X + rx.lo;
                    for (std::int64_t i = 0; i < n; ++i) dst[i] += wv * src[i];
                  }
                }
              }
            }
          }
        }
      });
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Instance normalization (per channel, per instance)
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> instance_norm(const NodeRef<T>& x, const NodeRef<T>& gain,
                         const NodeRef<T>& shift, double eps = 1e-5) {
  detail::require_4d(x, "instance_norm");
  if (eps <= 0.0) throw std::invalid_argument("instance_norm: eps must be positive");
  const std::int64_t C = x->value.c(), n = x->value.voxels();
  if (gain->value.size() != C || shift->value.size() != C) {
    throw std::invalid_argument("instance_norm: gain/shift size mismatch");
  }

  Tensor<T> out(x->value.dims());
  std::vector<double> mu(C), inv(C);
  const T* xd = x->value.data();
  T* od = out.data();
  for (std::int64_t c = 0; c < C; ++c) {
    const T* xc = xd + c * n;
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) sum += double(xc[i]);
    const double m = sum / double(n);
    double ss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double d = double(xc[i]) - m;
      ss += d * d;
    }
    mu[c] = m;
    inv[c] = 1.0 / std::sqrt(ss / double(n) + eps);
    const T g = gain->value[c], s = shift->value[c];
    T* oc = od + c * n;
    for (std::int64_t i = 0; i < n; ++i) {
      oc[i] = static_cast<T>((double(xc[i]) - m) * inv[c]) * g + s;
    }
  }

  auto node = detail::make_op<T>(std::move(out), {x, gain, shift});
  Node<T>* xn = x.get();
  Node<T>* gn = gain.get();
  Node<T>* sn = shift.get();
  Node<T>* self = node.get();
  node->backprop = [=, mu = std::move(mu), inv = std::move(inv)]() {
    const T* gd = self->grad.data();
    const T* xd2 = xn->value.data();
    for (std::int64_t c = 0; c < C; ++c) {
      const T* gc = gd + c * n;
      const T* xc = xd2 + c * n;
      const double m = mu[c], r = inv[c];
      const double gv = double(gn->value[c]);
      double sum_g = 0.0, sum_gx = 0.0, sum_raw = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double xh = (double(xc[i]) - m) * r;
        sum_g += double(gc[i]);
        sum_gx += double(gc[i]) * xh;
        sum_raw += double(gc[i]);
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        gn->grad[c] += static_cast<T>(sum_gx);
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        sn->grad[c] += static_cast<T>(sum_raw);
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* dx = xn->grad.data() + c * n;
        const double m1 = gv * sum_g / double(n);
        const double m2 = gv * sum_gx / double(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const double xh = (double(xc[i]) - m) * r;
          dx[i] += static_cast<T>(r * (gv * double(gc[i]) - m1 - xh * m2));
        }
      }
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// LeakyReLU
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> leaky_relu(const NodeRef<T>& x, double slope = 0.01) {
  if (slope <= 0.0 || slope >= 1.0) {
    throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
  }
  const T s = static_cast<T>(slope);
  Tensor<T> out(x->value.dims());
  const std::int64_t n = x->value.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x->value[i];
    out[i] = v >= T(0) ? v : s * v;
  }
  auto node = detail::make_op<T>(std::move(out), {x});
  Node<T>* xn = x.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) {
      xn->grad[i] += self->grad[i] * (xn->value[i] >= T(0) ? T(1) : s);
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling (factors in {1,2} per axis)
// ---------------------------------------------------------------------------

struct Factors3 {
  int z = 1, y = 1, x = 1;
};

template <typename T>
NodeRef<T> max_pool(const NodeRef<T>& x, Factors3 f) {
  detail::require_4d(x, "max_pool");
  for (int v : {f.z, f.y, f.x}) {
    if (v != 1 && v != 2) throw std::invalid_argument("max_pool: factors must be 1 or 2");
  }
  const std::int64_t C = x->value.c(), Z = x->value.z(), Y = x->value.y(),
                     X = x->value.x();
  if (Z % f.z) throw std::invalid_argument("max_pool: Z not divisible by factor");
  if (Y % f.y) throw std::invalid_argument("max_pool: Y not divisible by factor");
  if (X % f.x) throw std::invalid_argument("max_pool: X not divisible by factor");

  const std::int64_t oz = Z / f.z, oy = Y / f.y, ox = X / f.x;
  Tensor<T> out({C, oz, oy, ox});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()));
  const T* xd = x->value.data();
  const std::int64_t plane = Y * X, vol = Z * plane;
  std::int64_t oi = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t z = 0; z < oz; ++z) {
      for (std::int64_t y = 0; y < oy; ++y) {
        for (std::int64_t xk = 0; xk < ox; ++xk, ++oi) {
          T best{};
          std::int64_t best_i = -1;
          for (int a = 0; a < f.z; ++a) {
            for (int b = 0; b < f.y; ++b) {
              for (int d = 0; d < f.x; ++d) {
                const std::int64_t idx = c * vol + (z * f.z + a) * plane +
                                         (y * f.y + b) * X + (xk * f.x + d);
                if (best_i < 0 || xd[idx] > best) {
                  best = xd[idx];
                  best_i = idx;
                }
              }
            }
          }
          out[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = best_i;
        }
      }
    }
  }
  auto node = detail::make_op<T>(std::move(out), {x});
  Node<T>* xn = x.get();
  Node<T>* self = node.get();
  node->backprop = [=, argmax = std::move(argmax)]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const std::int64_t m = self->grad.size();
    for (std::int64_t i = 0; i < m; ++i) {
      xn->grad[argmax[static_cast<std::size_t>(i)]] += self->grad[i];
    }
  };
  return node;
}

namespace detail {

struct LerpTap {
  std::int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1-w1
};

// align-corners-false sampling: source position (o + 0.5)/f - 0.5, edge-clamped
inline std::vector<LerpTap> upsample_taps(std::int64_t in, int f) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in * f));
  for (std::int64_t o = 0; o < in * f; ++o) {
    double pos = (double(o) + 0.5) / double(f) - 0.5;
    pos = std::clamp(pos, 0.0, double(in - 1));
    const std::int64_t i0 = static_cast<std::int64_t>(std::floor(pos));
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, pos - double(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
NodeRef<T> linear_upsample(const NodeRef<T>& x, Factors3 f) {
  detail::require_4d(x, "linear_upsample");
  for (int v : {f.z, f.y, f.x}) {
    if (v != 1 && v != 2) {
      throw std::invalid_argument("linear_upsample: factors must be 1 or 2");
    }
  }
  const std::int64_t C = x->value.c(), Z = x->value.z(), Y = x->value.y(),
                     X = x->value.x();
  const auto tz = detail::upsample_taps(Z, f.z);
  const auto ty = detail::upsample_taps(Y, f.y);
  const auto tx = detail::upsample_taps(X, f.x);
  const std::int64_t oz = Z * f.z, oy = Y * f.y, ox = X * f.x;
  Tensor<T> out({C, oz, oy, ox});
  const std::int64_t plane = Y * X, vol = Z * plane;
  const T* xd = x->value.data();
  T* od = out.data();
  parallel_for(C, [&](std::int64_t c) {
    const T* xc = xd + c * vol;
    T* oc = od + c * oz * oy * ox;
    for (std::int64_t z = 0; z < oz; ++z) {
      const auto& az = tz[static_cast<std::size_t>(z)];
      for (std::int64_t y = 0; y < oy; ++y) {
        const auto& ay = ty[static_cast<std::size_t>(y)];
        const double w00 = (1 - az.w1) * (1 - ay.w1);
        const double w01 = (1 - az.w1) * ay.w1;
        const double w10 = az.w1 * (1 - ay.w1);
        const double w11 = az.w1 * ay.w1;
        const T* r00 = xc + az.i0 * plane + ay.i0 * X;
        const T* r01 = xc + az.i0 * plane + ay.i1 * X;
        const T* r10 = xc + az.i1 * plane + ay.i0 * X;
        const T* r11 = xc + az.i1 * plane + ay.i1 * X;
        T* orow = oc + (z * oy + y) * ox;
        for (std::int64_t xi = 0; xi < ox; ++xi) {
          const auto& ax = tx[static_cast<std::size_t>(xi)];
          const double v0 = w00 * double(r00[ax.i0]) + w01 * double(r01[ax.i0]) +
                            w10 * double(r10[ax.i0]) + w11 * double(r11[ax.i0]);
          const double v1 = w00 * double(r00[ax.i1]) + w01 * double(r01[ax.i1]) +
                            w10 * double(r10[ax.i1]) + w11 * double(r11[ax.i1]);
          orow[xi] = static_cast<T>(v0 * (1.0 - ax.w1) + v1 * ax.w1);
        }
      }
    }
  });
  auto node = detail::make_op<T>(std::move(out), {x});
  Node<T>* xn = x.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* gd = self->grad.data();
    T* dx = xn->grad.data();
    parallel_for(C, [&](std::int64_t c) {
      const T* gc = gd + c * oz * oy * ox;
      T* dxc = dx + c * vol;
      for (std::int64_t z = 0; z < oz; ++z) {
        const auto& az = tz[static_cast<std::size_t>(z)];
        for (std::int64_t y = 0; y < oy; ++y) {
          const auto& ay = ty[static_cast<std::size_t>(y)];
          const T* grow = gc + (z * oy + y) * ox;
          for (std::int64_t xi = 0; xi < ox; ++xi) {
            const auto& ax = tx[static_cast<std::size_t>(xi)];
            const double g = double(grow[xi]);
            const double wz[2] = {1.0 - az.w1, az.w1};
            const double wy[2] = {1.0 - ay.w1, ay.w1};
            const double wx[2] = {1.0 - ax.w1, ax.w1};
            const std::int64_t iz[2] = {az.i0, az.i1};
            const std::int64_t iy[2] = {ay.i0, ay.i1};
            const std::int64_t ix[2] = {ax.i0, ax.i1};
            for (int a = 0; a < 2; ++a) {
              if (wz[a] == 0.0) continue;
              for (int b = 0; b < 2; ++b) {
                if (wy[b] == 0.0) continue;
                for (int d = 0; d < 2; ++d) {
                  if (wx[d] == 0.0) continue;
                  dxc[iz[a] * plane + iy[b] * X + ix[d]] +=
                      static_cast<T>(g * wz[a] * wy[b] * wx[d]);
                }
              }
            }
          }
        }
      }
    });
  };
  return node;
}

// ---------------------------------------------------------------------------
// Concatenation, FMU, softmax, channel slicing
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> concat(const std::vector<NodeRef<T>>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
  if (inputs.size() == 1) return inputs[0];
  const auto& first = inputs[0]->value;
  detail::require_4d(inputs[0], "concat");
  std::int64_t channels = 0;
  for (const auto& in : inputs) {
    detail::require_4d(in, "concat");
    if (in->value.z() != first.z() || in->value.y() != first.y() ||
        in->value.x() != first.x()) {
      throw std::invalid_argument("concat: spatial dims mismatch");
    }
    channels += in->value.c();
  }
  Tensor<T> out({channels, first.z(), first.y(), first.x()});
  std::int64_t off = 0;
  for (const auto& in : inputs) {
    std::copy(in->value.data(), in->value.data() + in->value.size(),
              out.data() + off);
    off += in->value.size();
  }
  auto node = detail::make_op<T>(std::move(out), inputs);
  Node<T>* self = node.get();
  std::vector<Node<T>*> raw;
  raw.reserve(inputs.size());
  for (const auto& in : inputs) raw.push_back(in.get());
  node->backprop = [=]() {
    std::int64_t o = 0;
    for (Node<T>* p : raw) {
      const std::int64_t sz = p->value.size();
      if (p->requires_grad) {
        p->ensure_grad();
        const T* g = self->grad.data() + o;
        T* dst = p->grad.data();
        for (std::int64_t i = 0; i < sz; ++i) dst[i] += g[i];
      }
      o += sz;
    }
  };
  return node;
}

/// Feature merging unit: elementwise |a - b| with subgradient sign(a-b)
/// (zero at equality).
template <typename T>
NodeRef<T> abs_diff(const NodeRef<T>& a, const NodeRef<T>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("abs_diff: shape mismatch");
  }
  const std::int64_t n = a->value.size();
  Tensor<T> out(a->value.dims());
  for (std::int64_t i = 0; i < n; ++i) {
    out[i] = std::abs(a->value[i] - b->value[i]);
  }
  auto node = detail::make_op<T>(std::move(out), {a, b});
  Node<T>* an = a.get();
  Node<T>* bn = b.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    for (std::int64_t i = 0; i < n; ++i) {
      const T d = an->value[i] - bn->value[i];
      const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      const T g = self->grad[i] * s;
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad[i] += g;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[i] -= g;
      }
    }
  };
  return node;
}

/// Per-voxel softmax over the channel axis.
template <typename T>
NodeRef<T> softmax_channels(const NodeRef<T>& x) {
  detail::require_4d(x, "softmax_channels");
  const std::int64_t C = x->value.c(), n = x->value.voxels();
  Tensor<T> out(x->value.dims());
  const T* xd = x->value.data();
  T* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    T m = xd[i];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, xd[c * n + i]);
    T sum = T(0);
    for (std::int64_t c = 0; c < C; ++c) {
      const T e = std::exp(xd[c * n + i] - m);
      od[c * n + i] = e;
      sum += e;
    }
    for (std::int64_t c = 0; c < C; ++c) od[c * n + i] /= sum;
  }
  auto node = detail::make_op<T>(std::move(out), {x});
  Node<T>* xn = x.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* p = self->value.data();
    const T* g = self->grad.data();
    T* dx = xn->grad.data();
    for (std::int64_t i = 0; i < n; ++i) {
      T dot = T(0);
      for (std::int64_t c = 0; c < C; ++c) dot += p[c * n + i] * g[c * n + i];
      for (std::int64_t c = 0; c < C; ++c) {
        dx[c * n + i] += p[c * n + i] * (g[c * n + i] - dot);
      }
    }
  };
  return node;
}

/// Copies channels [c0, c0+count) into a new node.
template <typename T>
NodeRef<T> slice_channels(const NodeRef<T>& x, std::int64_t c0,
                          std::int64_t count) {
  detail::require_4d(x, "slice_channels");
  if (c0 < 0 || count <= 0 || c0 + count > x->value.c()) {
    throw std::invalid_argument("slice_channels: range out of bounds");
  }
  const std::int64_t n = x->value.voxels();
  Tensor<T> out({count, x->value.z(), x->value.y(), x->value.x()});
  std::copy(x->value.data() + c0 * n, x->value.data() + (c0 + count) * n,
            out.data());
  auto node = detail::make_op<T>(std::move(out), {x});
  Node<T>* xn = x.get();
  Node<T>* self = node.get();
  node->backprop = [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    T* dst = xn->grad.data() + c0 * n;
    const T* g = self->grad.data();
    for (std::int64_t i = 0; i < count * n; ++i) dst[i] += g[i];
  };
  return node;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

template <typename T>
NodeRef<T> loss_mse(const NodeRef<T>& pred, const Tensor<T>& target) {
  if (!pred->value.same_shape(target)) {
    throw std::invalid_argument("loss_mse: shape mismatch");
  }
  const std::int64_t n = pred->value.size();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = double(pred->value[i]) - double(target[i]);
    acc += d * d;
  }
  auto node = detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(acc / double(n))),
                                 {pred});
  Node<T>* pn = pred.get();
  Node<T>* self = node.get();
  node->backprop = [=, target = target]() {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const T g = self->grad[0];
    const T scale = g * T(2) / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      pn->grad[i] += scale * (pn->value[i] - target[i]);
    }
  };
  return node;
}

/// Weighted binary cross-entropy on probabilities (clamped away from {0,1}).
template <typename T>
NodeRef<T> loss_ce(const NodeRef<T>& pred, const Tensor<T>& target, double beta) {
  if (!pred->value.same_shape(target)) {
    throw std::invalid_argument("loss_ce: shape mismatch");
  }
  if (beta <= 0.0 || beta >= 1.0) throw std::invalid_argument("loss_ce: beta in (0,1)");
  const std::int64_t n = pred->value.size();
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(double(pred->value[i]), lo, hi);
    const double t = double(target[i]);
    acc += beta * t * std::log(p) + (1.0 - beta) * (1.0 - t) * std::log(1.0 - p);
  }
  auto node = detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(-acc / double(n))),
                                 {pred});
  Node<T>* pn = pred.get();
  Node<T>* self = node.get();
  node->backprop = [=, target = target]() {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const double g = double(self->grad[0]) / double(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const double raw = double(pn->value[i]);
      if (raw <= lo || raw >= hi) continue;  // clamped: zero gradient
      const double t = double(target[i]);
      const double d = beta * t / raw - (1.0 - beta) * (1.0 - t) / (1.0 - raw);
      pn->grad[i] += static_cast<T>(-g * d);
    }
  };
  return node;
}

/// Focal loss on probabilities, alpha-balanced with focusing parameter gamma.
template <typename T>
NodeRef<T> loss_focal(const NodeRef<T>& pred, const Tensor<T>& target,
                      double alpha, double gamma) {
  if (!pred->value.same_shape(target)) {
    throw std::invalid_argument("loss_focal: shape mismatch");
  }
  if (alpha <= 0.0 || alpha >= 1.0) throw std::invalid_argument("loss_focal: alpha in (0,1)");
  if (gamma < 0.0) throw std::invalid_argument("loss_focal: gamma >= 0");
  const std::int64_t n = pred->value.size();
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(double(pred->value[i]), lo, hi);
    const double t = double(target[i]);
    acc += alpha * std::pow(1.0 - p, gamma) * t * std::log(p) +
           (1.0 - alpha) * std::pow(p, gamma) * (1.0 - t) * std::log(1.0 - p);
  }
  auto node = detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(-acc / double(n))),
                                 {pred});
  Node<T>* pn = pred.get();
  Node<T>* self = node.get();
  node->backprop = [=, target = target]() {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const double g = double(self->grad[0]) / double(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const double raw = double(pn->value[i]);
      if (raw <= lo || raw >= hi) continue;
      const double t = double(target[i]);
      const double d1 = gamma == 0.0
                            ? 1.0 / raw
                            : -gamma * std::pow(1.0 - raw, gamma - 1.0) * std::log(raw) +
                                  std::pow(1.0 - raw, gamma) / raw;
      const double d0 = gamma == 0.0
                            ? -1.0 / (1.0 - raw)
                            : gamma * std::pow(raw, gamma - 1.0) * std::log(1.0 - raw) -
                                  std::pow(raw, gamma) / (1.0 - raw);
      pn->grad[i] += static_cast<T>(-g * (alpha * t * d1 + (1.0 - alpha) * (1.0 - t) * d0));
    }
  };
  return node;
}

/// Weighted sum of scalar nodes (deep-supervision aggregation).
template <typename T>
NodeRef<T> weighted_sum(const std::vector<NodeRef<T>>& terms,
                        const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: terms/weights mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.size() != 1) {
      throw std::invalid_argument("weighted_sum: non-scalar term");
    }
    acc += weights[i] * double(terms[i]->value[0]);
  }
  auto node = detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), terms);
  Node<T>* self = node.get();
  std::vector<Node<T>*> raw;
  raw.reserve(terms.size());
  for (const auto& t : terms) raw.push_back(t.get());
  node->backprop = [=, weights = weights]() {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (!raw[i]->requires_grad) continue;
      raw[i]->ensure_grad();
      raw[i]->grad[0] += static_cast<T>(weights[i]) * self->grad[0];
    }
  };
  return node;
}

}  // namespace zmesh::nn
