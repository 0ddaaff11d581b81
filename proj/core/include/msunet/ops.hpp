// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op library on top of the tape in autodiff.hpp.
// Conventions: tensors are dense row-major; binary ops broadcast with
// trailing-dimension alignment; every backward accumulates (+=) so a value
// may feed several consumers.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msunet/autodiff.hpp"
#include "msunet/parallel.hpp"

namespace msunet {

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> stride_a;  // per out dim; 0 where `a` broadcasts
  std::vector<int64_t> stride_b;
  int64_t out_numel = 0;
  bool same_shape = false;
};

inline BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.same_shape = (a == b);
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  plan.out.resize(r);
  plan.stride_a.assign(r, 0);
  plan.stride_b.assign(r, 0);

  std::vector<int64_t> full_a(r, 1), full_b(r, 1);
  for (int i = 0; i < ra; ++i) full_a[r - ra + i] = a[i];
  for (int i = 0; i < rb; ++i) full_b[r - rb + i] = b[i];

  for (int i = 0; i < r; ++i) {
    MSUNET_CHECK(full_a[i] == full_b[i] || full_a[i] == 1 || full_b[i] == 1,
                 "shapes not broadcastable: " << shape_str(a) << " vs " << shape_str(b));
    plan.out[i] = std::max(full_a[i], full_b[i]);
  }
  int64_t sa = 1, sb = 1;
  for (int i = r; i-- > 0;) {
    plan.stride_a[i] = (full_a[i] == 1) ? 0 : sa;
    plan.stride_b[i] = (full_b[i] == 1) ? 0 : sb;
    sa *= full_a[i];
    sb *= full_b[i];
  }
  plan.out_numel = numel(plan.out);
  return plan;
}

namespace detail {

/// Calls fn(out_flat, a_flat, b_flat) for every output element, in ascending
/// output order (odometer over the broadcast plan).
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& fn) {
  const int r = static_cast<int>(plan.out.size());
  if (r == 0) {
    fn(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < plan.out_numel; ++o) {
    fn(o, ia, ib);
    for (int d = r; d-- > 0;) {
      ++idx[d];
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.stride_a[d] * plan.out[d];
      ib -= plan.stride_b[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

// FwdFn: T(T a, T b). DaFn/DbFn: T(T gout, T a, T b) -> gradient contribution.
template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Var<T> binary_op(Var<T> a, Var<T> b, FwdFn fwd, DaFn da, DbFn db) {
  MSUNET_CHECK(a.g == b.g, "binary op across graphs");
  BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const T* ap = a.val().ptr();
  const T* bp = b.val().ptr();
  T* op = out.ptr();
  if (plan.same_shape) {
    parallel_for(plan.out_numel, 1 << 14, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) op[i] = fwd(ap[i], bp[i]);
    });
  } else {
    detail::for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
      op[o] = fwd(ap[ia], bp[ib]);
    });
  }
  return a.g->make_node(std::move(out), {a.n, b.n}, [plan, da, db](Node<T>& self) {
    Node<T>* na = self.parents[0];
    Node<T>* nb = self.parents[1];
    const T* ap2 = na->value.ptr();
    const T* bp2 = nb->value.ptr();
    const T* gp = self.grad.ptr();
    if (plan.same_shape && na->requires_grad && nb->requires_grad) {
      na->ensure_grad();
      nb->ensure_grad();
      T* ga = na->grad.ptr();
      T* gb = nb->grad.ptr();
      parallel_for(plan.out_numel, 1 << 14, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          ga[i] += da(gp[i], ap2[i], bp2[i]);
          gb[i] += db(gp[i], ap2[i], bp2[i]);
        }
      });
      return;
    }
    if (na->requires_grad) na->ensure_grad();
    if (nb->requires_grad) nb->ensure_grad();
    T* ga = na->requires_grad ? na->grad.ptr() : nullptr;
    T* gb = nb->requires_grad ? nb->grad.ptr() : nullptr;
    detail::for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
      if (ga) ga[ia] += da(gp[o], ap2[ia], bp2[ib]);
      if (gb) gb[ib] += db(gp[o], ap2[ia], bp2[ib]);
    });
  });
}

// FwdFn: T(T x). DFn: T(T gout, T x, T y).
template <typename T, typename FwdFn, typename DFn>
Var<T> unary_op(Var<T> x, FwdFn fwd, DFn dfn) {
  Tensor<T> out(x.shape());
  const T* xp = x.val().ptr();
  T* op = out.ptr();
  const int64_t n = x.numel();
  parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) op[i] = fwd(xp[i]);
  });
  return x.g->make_node(std::move(out), {x.n}, [dfn, n](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* xp2 = nx->value.ptr();
    const T* yp = self.value.ptr();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) gx[i] += dfn(gp[i], xp2[i], yp[i]);
    });
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Var<T> add_scalar(Var<T> x, double c) {
  const T tc = static_cast<T>(c);
  return unary_op(
      x, [tc](T v) { return v + tc; }, [](T g, T, T) { return g; });
}

template <typename T>
Var<T> mul_scalar(Var<T> x, double c) {
  const T tc = static_cast<T>(c);
  return unary_op(
      x, [tc](T v) { return v * tc; }, [tc](T g, T, T) { return g * tc; });
}

/// c - x
template <typename T>
Var<T> rsub_scalar(Var<T> x, double c) {
  const T tc = static_cast<T>(c);
  return unary_op(
      x, [tc](T v) { return tc - v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Var<T> neg(Var<T> x) {
  return mul_scalar(x, -1.0);
}

template <typename T>
Var<T> exp_of(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <typename T>
Var<T> sqrt_of(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::sqrt(v); },
      [](T g, T, T y) { return g / (T(2) * y); });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary_op(
      x, [](T v) { return v * v; }, [](T g, T v, T) { return g * T(2) * v; });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  // Exact (erf) form.
  return unary_op(
      x,
      [](T v) {
        return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2.0)));
      },
      [](T g, T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2.0)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(1.0 / std::sqrt(2.0 * std::numbers::pi));
        return g * (cdf + v * pdf);
      });
}

/// Clamp with pass-through subgradient strictly inside the interval.
template <typename T>
Var<T> clamp(Var<T> x, double lo, double hi) {
  const T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
  return unary_op(
      x, [tlo, thi](T v) { return v < tlo ? tlo : (v > thi ? thi : v); },
      [tlo, thi](T g, T v, T) { return (v > tlo && v < thi) ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
  long double acc = 0;
  const T* xp = x.val().ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xp[i];
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  return x.g->make_node(std::move(out), {x.n}, [n](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T g = self.grad.data[0];
    T* gx = nx->grad.ptr();
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

/// Sum over the given axes (no keepdims). Axes must be sorted and unique.
template <typename T>
Var<T> reduce_sum(Var<T> x, const std::vector<int>& axes) {
  const Shape& in_shape = x.shape();
  const int r = static_cast<int>(in_shape.size());
  std::vector<char> reduced(r, 0);
  for (int a : axes) {
    MSUNET_CHECK(a >= 0 && a < r, "reduce_sum axis " << a << " out of range");
    reduced[a] = 1;
  }
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);

  // Stride of each input dim into the output index space.
  std::vector<int64_t> out_stride(r, 0);
  int64_t s = 1;
  for (int i = r; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = s;
      s *= in_shape[i];
    }
  }

  const int64_t n = x.numel();
  Tensor<T> out(out_shape);
  T* op = out.ptr();
  const T* xp = x.val().ptr();
  std::vector<int64_t> idx(r, 0);
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    op[oi] += xp[i];
    for (int d = r; d-- > 0;) {
      ++idx[d];
      oi += out_stride[d];
      if (idx[d] < in_shape[d]) break;
      oi -= out_stride[d] * in_shape[d];
      idx[d] = 0;
    }
  }
  return x.g->make_node(std::move(out), {x.n}, [in_shape, out_stride, r, n](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    std::vector<int64_t> idx2(r, 0);
    int64_t oi2 = 0;
    for (int64_t i = 0; i < n; ++i) {
      gx[i] += gp[oi2];
      for (int d = r; d-- > 0;) {
        ++idx2[d];
        oi2 += out_stride[d];
        if (idx2[d] < in_shape[d]) break;
        oi2 -= out_stride[d] * in_shape[d];
        idx2[d] = 0;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  MSUNET_CHECK(numel(s) == x.numel(),
               "reshape " << shape_str(x.shape()) << " -> " << shape_str(s));
  Tensor<T> out(std::move(s), x.val().data);
  return x.g->make_node(std::move(out), {x.n}, [](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    const int64_t n = self.grad.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += gp[i];
  });
}

/// x[..., off : off+len] over the last dimension.
template <typename T>
Var<T> slice_last(Var<T> x, int64_t off, int64_t len) {
  const Shape& in = x.shape();
  MSUNET_CHECK(!in.empty(), "slice_last on rank-0");
  const int64_t C = in.back();
  MSUNET_CHECK(off >= 0 && len > 0 && off + len <= C,
               "slice_last [" << off << "," << off + len << ") out of " << C);
  Shape out_shape = in;
  out_shape.back() = len;
  const int64_t rows = x.numel() / C;
  Tensor<T> out(out_shape);
  const T* xp = x.val().ptr();
  T* op = out.ptr();
  parallel_for(rows, 1 << 10, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r)
      std::memcpy(op + r * len, xp + r * C + off, sizeof(T) * static_cast<size_t>(len));
  });
  return x.g->make_node(std::move(out), {x.n}, [rows, C, off, len](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    parallel_for(rows, 1 << 10, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r)
        for (int64_t c = 0; c < len; ++c) gx[r * C + off + c] += gp[r * len + c];
    });
  });
}

/// Concatenate along the last dimension. All leading dims must match.
template <typename T>
Var<T> concat_last(std::vector<Var<T>> xs) {
  MSUNET_CHECK(!xs.empty(), "concat_last of nothing");
  Graph<T>* g = xs[0].g;
  Shape lead = xs[0].shape();
  lead.pop_back();
  int64_t total_c = 0;
  std::vector<int64_t> widths;
  for (const auto& x : xs) {
    Shape l = x.shape();
    MSUNET_CHECK(!l.empty(), "concat_last on rank-0");
    const int64_t c = l.back();
    l.pop_back();
    MSUNET_CHECK(l == lead, "concat_last leading dims mismatch");
    widths.push_back(c);
    total_c += c;
  }
  Shape out_shape = lead;
  out_shape.push_back(total_c);
  const int64_t rows = numel(lead);
  Tensor<T> out(out_shape);
  T* op = out.ptr();
  int64_t col = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const T* xp = xs[k].val().ptr();
    const int64_t w = widths[k];
    parallel_for(rows, 1 << 10, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r)
        std::memcpy(op + r * total_c + col, xp + r * w, sizeof(T) * static_cast<size_t>(w));
    });
    col += w;
  }
  std::vector<Node<T>*> parents;
  for (auto& x : xs) parents.push_back(x.n);
  return g->make_node(std::move(out), std::move(parents),
                      [rows, widths, total_c](Node<T>& self) {
                        const T* gp = self.grad.ptr();
                        int64_t col2 = 0;
                        for (size_t k = 0; k < self.parents.size(); ++k) {
                          Node<T>* nx = self.parents[k];
                          const int64_t w = widths[k];
                          if (nx->requires_grad) {
                            nx->ensure_grad();
                            T* gx = nx->grad.ptr();
                            parallel_for(rows, 1 << 10, [&](int64_t lo, int64_t hi) {
                              for (int64_t r = lo; r < hi; ++r)
                                for (int64_t c = 0; c < w; ++c)
                                  gx[r * w + c] += gp[r * total_c + col2 + c];
                            });
                          }
                          col2 += w;
                        }
                      });
}

// ---------------------------------------------------------------------------
// Index-map gather (window partition/reverse, rolls, rearranges, shifts...)
// ---------------------------------------------------------------------------

/// out[o] = in[src[o]]. Backward scatters through a CSR inverse built once,
/// so accumulation order is fixed regardless of threading.
struct IndexMap {
  Shape out_shape;
  std::vector<int64_t> src;
  int64_t in_numel = 0;

  void build_inverse() const {
    std::scoped_lock lock(mu_);
    if (inv_built_) return;
    inv_offsets_.assign(static_cast<size_t>(in_numel) + 1, 0);
    for (int64_t s : src) ++inv_offsets_[static_cast<size_t>(s) + 1];
    for (size_t i = 1; i < inv_offsets_.size(); ++i) inv_offsets_[i] += inv_offsets_[i - 1];
    inv_list_.resize(src.size());
    std::vector<int64_t> cursor(inv_offsets_.begin(), inv_offsets_.end() - 1);
    for (int64_t o = 0; o < static_cast<int64_t>(src.size()); ++o)
      inv_list_[static_cast<size_t>(cursor[static_cast<size_t>(src[static_cast<size_t>(o)])]++)] = o;
    inv_built_ = true;
  }

  const std::vector<int64_t>& inv_offsets() const { return inv_offsets_; }
  const std::vector<int64_t>& inv_list() const { return inv_list_; }

private:
  mutable std::mutex mu_;
  mutable std::vector<int64_t> inv_offsets_, inv_list_;
  mutable bool inv_built_ = false;
};

using IndexMapPtr = std::shared_ptr<const IndexMap>;

/// Process-wide cache: maps are pure functions of their key.
class MapCache {
public:
  template <typename Builder>
  static IndexMapPtr get(const std::string& key, Builder&& build) {
    static MapCache cache;
    {
      std::scoped_lock lock(cache.mu_);
      auto it = cache.maps_.find(key);
      if (it != cache.maps_.end()) return it->second;
    }
    auto built = std::make_shared<IndexMap>(build());
    std::scoped_lock lock(cache.mu_);
    auto [it, inserted] = cache.maps_.emplace(key, std::move(built));
    return it->second;
  }

private:
  std::mutex mu_;
  std::unordered_map<std::string, IndexMapPtr> maps_;
};

template <typename T>
Var<T> apply_map(Var<T> x, IndexMapPtr map) {
  MSUNET_CHECK(map->in_numel == x.numel(),
               "index map expects " << map->in_numel << " elements, got " << x.numel());
  Tensor<T> out(map->out_shape);
  const T* xp = x.val().ptr();
  T* op = out.ptr();
  const int64_t n = out.numel();
  const int64_t* src = map->src.data();
  parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) op[i] = xp[src[i]];
  });
  return x.g->make_node(std::move(out), {x.n}, [map](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    map->build_inverse();
    const auto& offsets = map->inv_offsets();
    const auto& list = map->inv_list();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    parallel_for(map->in_numel, 1 << 12, [&](int64_t lo, int64_t hi) {
      for (int64_t s = lo; s < hi; ++s) {
        T acc = T(0);
        for (int64_t k = offsets[static_cast<size_t>(s)]; k < offsets[static_cast<size_t>(s) + 1]; ++k)
          acc += gp[list[static_cast<size_t>(k)]];
        gx[s] += acc;
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace detail

/// y = x @ W + b where x is (..., K), W is (K, N), b is (N) or absent.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T>* bias) {
  const Shape& xs = x.shape();
  MSUNET_CHECK(!xs.empty(), "linear on rank-0 input");
  const int64_t K = xs.back();
  MSUNET_CHECK(weight.shape().size() == 2 && weight.shape()[0] == K,
               "linear weight shape " << shape_str(weight.shape()) << " vs input K=" << K);
  const int64_t N = weight.shape()[1];
  const int64_t M = x.numel() / K;
  if (bias != nullptr)
    MSUNET_CHECK(bias->shape() == Shape{N}, "linear bias shape mismatch");

  Shape out_shape = xs;
  out_shape.back() = N;
  Tensor<T> out(out_shape);

  const T* xp = x.val().ptr();
  const T* wp = weight.val().ptr();
  const T* bp = bias ? bias->val().ptr() : nullptr;
  T* op = out.ptr();

  parallel_for(M, 64, [&](int64_t lo, int64_t hi) {
    detail::ConstMatMap<T> xm(xp + lo * K, hi - lo, K);
    detail::ConstMatMap<T> wm(wp, K, N);
    detail::MatMap<T> om(op + lo * N, hi - lo, N);
    om.noalias() = xm * wm;
    if (bp != nullptr) {
      detail::ConstMatMap<T> bm(bp, 1, N);
      om.rowwise() += bm.row(0);
    }
  });

  std::vector<Node<T>*> parents{x.n, weight.n};
  if (bias != nullptr) parents.push_back(bias->n);
  return x.g->make_node(std::move(out), std::move(parents), [M, K, N](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    Node<T>* nw = self.parents[1];
    Node<T>* nb = self.parents.size() > 2 ? self.parents[2] : nullptr;
    const T* gp = self.grad.ptr();
    if (nx->requires_grad) {
      nx->ensure_grad();
      T* gx = nx->grad.ptr();
      const T* wp2 = nw->value.ptr();
      parallel_for(M, 64, [&](int64_t lo, int64_t hi) {
        detail::ConstMatMap<T> gm(gp + lo * N, hi - lo, N);
        detail::ConstMatMap<T> wm(wp2, K, N);
        detail::MatMap<T> gxm(gx + lo * K, hi - lo, K);
        gxm.noalias() += gm * wm.transpose();
      });
    }
    if (nw->requires_grad) {
      nw->ensure_grad();
      T* gw = nw->grad.ptr();
      const T* xp2 = nx->value.ptr();
      // Split over output rows of dW; each row sums over M in fixed order.
      parallel_for(K, 16, [&](int64_t lo, int64_t hi) {
        detail::ConstMatMap<T> xm(xp2, M, K);
        detail::ConstMatMap<T> gm(gp, M, N);
        detail::MatMap<T> gwm(gw + lo * N, hi - lo, N);
        gwm.noalias() += xm.middleCols(lo, hi - lo).transpose() * gm;
      });
    }
    if (nb != nullptr && nb->requires_grad) {
      nb->ensure_grad();
      T* gb = nb->grad.ptr();
      for (int64_t m = 0; m < M; ++m)
        for (int64_t j = 0; j < N; ++j) gb[j] += gp[m * N + j];
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return linear(x, weight, &bias);
}

template <typename T>
Var<T> linear_nobias(Var<T> x, Var<T> weight) {
  return linear<T>(x, weight, nullptr);
}

/// Batched matmul: a (L..., M, K) x b (L..., K, N) -> (L..., M, N), with an
/// optional transpose of b's trailing two dims (then b is (L..., N, K)).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false) {
  MSUNET_CHECK(a.g == b.g, "bmm across graphs");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  MSUNET_CHECK(sa.size() >= 2 && sa.size() == sb.size(), "bmm rank mismatch");
  Shape lead(sa.begin(), sa.end() - 2);
  MSUNET_CHECK(Shape(sb.begin(), sb.end() - 2) == lead, "bmm leading dims mismatch");
  const int64_t M = sa[sa.size() - 2];
  const int64_t K = sa[sa.size() - 1];
  const int64_t bK = trans_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const int64_t N = trans_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
  MSUNET_CHECK(bK == K, "bmm inner dim mismatch: " << K << " vs " << bK);
  const int64_t L = numel(lead);

  Shape out_shape = lead;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  const T* ap = a.val().ptr();
  const T* bp = b.val().ptr();
  T* op = out.ptr();
  const int64_t sa2 = M * K, sb2 = K * N, so2 = M * N;

  parallel_for(L, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t l = lo; l < hi; ++l) {
      detail::ConstMatMap<T> am(ap + l * sa2, M, K);
      detail::MatMap<T> om(op + l * so2, M, N);
      if (trans_b) {
        detail::ConstMatMap<T> bm(bp + l * sb2, N, K);
        om.noalias() = am * bm.transpose();
      } else {
        detail::ConstMatMap<T> bm(bp + l * sb2, K, N);
        om.noalias() = am * bm;
      }
    }
  });

  return a.g->make_node(std::move(out), {a.n, b.n}, [L, M, K, N, trans_b](Node<T>& self) {
    Node<T>* na = self.parents[0];
    Node<T>* nb = self.parents[1];
    const T* gp = self.grad.ptr();
    const int64_t sa3 = M * K, sb3 = K * N, so3 = M * N;
    if (na->requires_grad) na->ensure_grad();
    if (nb->requires_grad) nb->ensure_grad();
    T* ga = na->requires_grad ? na->grad.ptr() : nullptr;
    T* gb = nb->requires_grad ? nb->grad.ptr() : nullptr;
    const T* ap2 = na->value.ptr();
    const T* bp2 = nb->value.ptr();
    parallel_for(L, 1, [&](int64_t lo, int64_t hi) {
      for (int64_t l = lo; l < hi; ++l) {
        detail::ConstMatMap<T> gm(gp + l * so3, M, N);
        detail::ConstMatMap<T> am(ap2 + l * sa3, M, K);
        if (trans_b) {
          detail::ConstMatMap<T> bm(bp2 + l * sb3, N, K);
          if (ga) detail::MatMap<T>(ga + l * sa3, M, K).noalias() += gm * bm;
          if (gb) detail::MatMap<T>(gb + l * sb3, N, K).noalias() += gm.transpose() * am;
        } else {
          detail::ConstMatMap<T> bm(bp2 + l * sb3, K, N);
          if (ga) detail::MatMap<T>(ga + l * sa3, M, K).noalias() += gm * bm.transpose();
          if (gb) detail::MatMap<T>(gb + l * sb3, K, N).noalias() += am.transpose() * gm;
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  MSUNET_CHECK(axis >= 0 && axis < r, "softmax axis out of range");
  const int64_t dim = s[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];

  Tensor<T> out(s);
  const T* xp = x.val().ptr();
  T* op = out.ptr();
  parallel_for(outer, 1, [&](int64_t olo, int64_t ohi) {
    for (int64_t o = olo; o < ohi; ++o) {
      const int64_t base = o * dim * inner;
      for (int64_t in = 0; in < inner; ++in) {
        T m = xp[base + in];
        for (int64_t d = 1; d < dim; ++d) m = std::max(m, xp[base + d * inner + in]);
        T z = T(0);
        for (int64_t d = 0; d < dim; ++d) {
          const T e = std::exp(xp[base + d * inner + in] - m);
          op[base + d * inner + in] = e;
          z += e;
        }
        const T rz = T(1) / z;
        for (int64_t d = 0; d < dim; ++d) op[base + d * inner + in] *= rz;
      }
    }
  });
  return x.g->make_node(std::move(out), {x.n}, [outer, dim, inner](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* yp = self.value.ptr();
    const T* gp = self.grad.ptr();
    T* gx = nx->grad.ptr();
    parallel_for(outer, 1, [&](int64_t olo, int64_t ohi) {
      for (int64_t o = olo; o < ohi; ++o) {
        const int64_t base = o * dim * inner;
        for (int64_t in = 0; in < inner; ++in) {
          T dot = T(0);
          for (int64_t d = 0; d < dim; ++d) {
            const int64_t i = base + d * inner + in;
            dot += gp[i] * yp[i];
          }
          for (int64_t d = 0; d < dim; ++d) {
            const int64_t i = base + d * inner + in;
            gx[i] += yp[i] * (gp[i] - dot);
          }
        }
      }
    });
  });
}

/// LayerNorm over the last dimension with learned scale/shift.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
  const Shape& s = x.shape();
  MSUNET_CHECK(!s.empty(), "layer_norm on rank-0");
  const int64_t C = s.back();
  MSUNET_CHECK(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
               "layer_norm gamma/beta must be (" << C << ")");
  const int64_t rows = x.numel() / C;

  Tensor<T> out(s);
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = x.val().ptr();
  const T* gm = gamma.val().ptr();
  const T* bt = beta.val().ptr();
  T* op = out.ptr();
  const T te = static_cast<T>(eps);
  parallel_for(rows, 64, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const T* row = xp + r * C;
      T mu = T(0);
      for (int64_t c = 0; c < C; ++c) mu += row[c];
      mu /= static_cast<T>(C);
      T var = T(0);
      for (int64_t c = 0; c < C; ++c) {
        const T d = row[c] - mu;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T rs = T(1) / std::sqrt(var + te);
      (*mean)[static_cast<size_t>(r)] = mu;
      (*rstd)[static_cast<size_t>(r)] = rs;
      T* orow = op + r * C;
      for (int64_t c = 0; c < C; ++c) orow[c] = (row[c] - mu) * rs * gm[c] + bt[c];
    }
  });

  return x.g->make_node(std::move(out), {x.n, gamma.n, beta.n},
                        [rows, C, mean, rstd](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    Node<T>* ng = self.parents[1];
    Node<T>* nb = self.parents[2];
    const T* xp2 = nx->value.ptr();
    const T* gm2 = ng->value.ptr();
    const T* gp = self.grad.ptr();
    if (nx->requires_grad) {
      nx->ensure_grad();
      T* gx = nx->grad.ptr();
      parallel_for(rows, 64, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          const T mu = (*mean)[static_cast<size_t>(r)];
          const T rs = (*rstd)[static_cast<size_t>(r)];
          const T* row = xp2 + r * C;
          const T* grow = gp + r * C;
          T sum_dg = T(0), sum_dgx = T(0);
          for (int64_t c = 0; c < C; ++c) {
            const T xhat = (row[c] - mu) * rs;
            const T dg = grow[c] * gm2[c];
            sum_dg += dg;
            sum_dgx += dg * xhat;
          }
          const T inv_c = T(1) / static_cast<T>(C);
          T* gxrow = gx + r * C;
          for (int64_t c = 0; c < C; ++c) {
            const T xhat = (row[c] - mu) * rs;
            const T dg = grow[c] * gm2[c];
            gxrow[c] += rs * (dg - sum_dg * inv_c - xhat * sum_dgx * inv_c);
          }
        }
      });
    }
    if (ng->requires_grad) {
      ng->ensure_grad();
      T* gg = ng->grad.ptr();
      for (int64_t r = 0; r < rows; ++r) {
        const T mu = (*mean)[static_cast<size_t>(r)];
        const T rs = (*rstd)[static_cast<size_t>(r)];
        for (int64_t c = 0; c < C; ++c)
          gg[c] += gp[r * C + c] * (xp2[r * C + c] - mu) * rs;
      }
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      T* gb = nb->grad.ptr();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) gb[c] += gp[r * C + c];
    }
  });
}

/// One-channel batch norm over every element of x. In training mode the batch
/// statistics normalize and update the running buffers (biased variance); in
/// eval mode the running buffers normalize.
template <typename T>
Var<T> batch_norm_all(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean,
                      Tensor<T>* running_var, double momentum, bool training,
                      double eps = 1e-5) {
  MSUNET_CHECK(gamma.numel() == 1 && beta.numel() == 1, "batch_norm_all expects scalar affine");
  MSUNET_CHECK(running_mean->numel() == 1 && running_var->numel() == 1,
               "batch_norm_all expects scalar running stats");
  const int64_t n = x.numel();
  const T* xp = x.val().ptr();
  T mu, var;
  if (training) {
    long double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += xp[i];
    mu = static_cast<T>(acc / n);
    long double vacc = 0;
    for (int64_t i = 0; i < n; ++i) {
      const long double d = xp[i] - mu;
      vacc += d * d;
    }
    var = static_cast<T>(vacc / n);
    running_mean->data[0] =
        static_cast<T>((1.0 - momentum) * running_mean->data[0] + momentum * mu);
    running_var->data[0] =
        static_cast<T>((1.0 - momentum) * running_var->data[0] + momentum * var);
  } else {
    mu = running_mean->data[0];
    var = running_var->data[0];
  }
  const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
  const T g0 = gamma.val().data[0];
  const T b0 = beta.val().data[0];
  Tensor<T> out(x.shape());
  T* op = out.ptr();
  parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) op[i] = (xp[i] - mu) * rs * g0 + b0;
  });
  return x.g->make_node(std::move(out), {x.n, gamma.n, beta.n},
                        [n, mu, rs, training](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    Node<T>* ng = self.parents[1];
    Node<T>* nb = self.parents[2];
    const T* xp2 = nx->value.ptr();
    const T* gp = self.grad.ptr();
    const T g0b = ng->value.data[0];
    long double sum_g = 0, sum_gx = 0;
    for (int64_t i = 0; i < n; ++i) {
      const T xhat = (xp2[i] - mu) * rs;
      sum_g += gp[i];
      sum_gx += gp[i] * xhat;
    }
    if (nx->requires_grad) {
      nx->ensure_grad();
      T* gx = nx->grad.ptr();
      if (training) {
        const T mg = static_cast<T>(sum_g / n);
        const T mgx = static_cast<T>(sum_gx / n);
        parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) {
            const T xhat = (xp2[i] - mu) * rs;
            gx[i] += g0b * rs * (gp[i] - mg - xhat * mgx);
          }
        });
      } else {
        parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) gx[i] += g0b * rs * gp[i];
        });
      }
    }
    if (ng->requires_grad) {
      ng->ensure_grad();
      ng->grad.data[0] += static_cast<T>(sum_gx);
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      nb->grad.data[0] += static_cast<T>(sum_g);
    }
  });
}

// ---------------------------------------------------------------------------
// 2-D convolution (single channel, same size)
// ---------------------------------------------------------------------------

enum class Pad { Zero, Replicate };

/// x (B, H, W) convolved with k (kh, kw), output (B, H, W). Correlation
/// convention (no kernel flip), odd kernel sizes only. Differentiable in
/// both x and k.
template <typename T>
Var<T> conv2d_hw(Var<T> x, Var<T> kernel, Pad pad) {
  const Shape& s = x.shape();
  MSUNET_CHECK(s.size() == 3, "conv2d_hw expects (B, H, W), got " << shape_str(s));
  const Shape& ks = kernel.shape();
  MSUNET_CHECK(ks.size() == 2 && ks[0] % 2 == 1 && ks[1] % 2 == 1,
               "conv2d_hw kernel must be odd-sized 2-D, got " << shape_str(ks));
  const int64_t B = s[0], H = s[1], W = s[2];
  const int64_t kh = ks[0], kw = ks[1];
  const int64_t ch = kh / 2, cw = kw / 2;

  Tensor<T> out(s);
  const T* xp = x.val().ptr();
  const T* kp = kernel.val().ptr();
  T* op = out.ptr();
  const bool rep = (pad == Pad::Replicate);

  auto sample = [&](const T* img, int64_t y, int64_t xx) -> T {
    if (rep) {
      y = std::clamp<int64_t>(y, 0, H - 1);
      xx = std::clamp<int64_t>(xx, 0, W - 1);
      return img[y * W + xx];
    }
    if (y < 0 || y >= H || xx < 0 || xx >= W) return T(0);
    return img[y * W + xx];
  };

  parallel_for(B, 1, [&](int64_t blo, int64_t bhi) {
    for (int64_t b = blo; b < bhi; ++b) {
      const T* img = xp + b * H * W;
      T* oimg = op + b * H * W;
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          T acc = T(0);
          for (int64_t u = 0; u < kh; ++u)
            for (int64_t v = 0; v < kw; ++v)
              acc += kp[u * kw + v] * sample(img, y + u - ch, xx + v - cw);
          oimg[y * W + xx] = acc;
        }
    }
  });

  return x.g->make_node(std::move(out), {x.n, kernel.n},
                        [B, H, W, kh, kw, ch, cw, rep](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    Node<T>* nk = self.parents[1];
    const T* gp = self.grad.ptr();
    const T* xp2 = nx->value.ptr();
    const T* kp2 = nk->value.ptr();
    auto src_of = [&](int64_t y, int64_t xx, bool& inside) -> int64_t {
      if (rep) {
        inside = true;
        return std::clamp<int64_t>(y, 0, H - 1) * W + std::clamp<int64_t>(xx, 0, W - 1);
      }
      inside = (y >= 0 && y < H && xx >= 0 && xx < W);
      return inside ? y * W + xx : 0;
    };
    if (nx->requires_grad) {
      nx->ensure_grad();
      T* gx = nx->grad.ptr();
      parallel_for(B, 1, [&](int64_t blo, int64_t bhi) {
        for (int64_t b = blo; b < bhi; ++b) {
          const T* gimg = gp + b * H * W;
          T* gxi = gx + b * H * W;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
              const T g = gimg[y * W + xx];
              for (int64_t u = 0; u < kh; ++u)
                for (int64_t v = 0; v < kw; ++v) {
                  bool inside;
                  const int64_t si = src_of(y + u - ch, xx + v - cw, inside);
                  if (inside) gxi[si] += kp2[u * kw + v] * g;
                }
            }
        }
      });
    }
    if (nk->requires_grad) {
      nk->ensure_grad();
      T* gk = nk->grad.ptr();
      for (int64_t b = 0; b < B; ++b) {
        const T* img = xp2 + b * H * W;
        const T* gimg = gp + b * H * W;
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            const T g = gimg[y * W + xx];
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) {
                bool inside;
                const int64_t si = src_of(y + u - ch, xx + v - cw, inside);
                gk[u * kw + v] += g * (inside ? img[si] : T(0));
              }
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Cross entropy (fused, numerically stable)
// ---------------------------------------------------------------------------

/// Mean over batch and pixels of -log softmax(logits)[label].
/// logits (B, C, H, W), labels (B, H, W) with values in [0, C).
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const Tensor<int32_t>& labels) {
  const Shape& s = logits.shape();
  MSUNET_CHECK(s.size() == 4, "cross_entropy expects (B, C, H, W) logits");
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  MSUNET_CHECK(labels.shape == Shape({B, H, W}),
               "labels shape " << shape_str(labels.shape) << " vs logits " << shape_str(s));
  const int64_t P = H * W;
  const int64_t n_pix = B * P;
  const T* lp = logits.val().ptr();
  const int32_t* yp = labels.ptr();

  for (int64_t i = 0; i < n_pix; ++i)
    MSUNET_CHECK(yp[i] >= 0 && yp[i] < C,
                 "label value " << yp[i] << " out of range [0, " << C << ")");

  std::vector<long double> partial(static_cast<size_t>(B), 0.0L);
  parallel_for(B, 1, [&](int64_t blo, int64_t bhi) {
    for (int64_t b = blo; b < bhi; ++b) {
      long double acc = 0;
      for (int64_t p = 0; p < P; ++p) {
        const int64_t base = (b * C) * P + p;
        T m = lp[base];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, lp[base + c * P]);
        long double z = 0;
        for (int64_t c = 0; c < C; ++c) z += std::exp(static_cast<long double>(lp[base + c * P] - m));
        const int64_t y = yp[b * P + p];
        acc += std::log(z) + m - lp[base + y * P];
      }
      partial[static_cast<size_t>(b)] = acc;
    }
  });
  long double total = 0;
  for (long double v : partial) total += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n_pix));

  Tensor<int32_t> labels_copy = labels;
  return logits.g->make_node(std::move(out), {logits.n},
                             [B, C, P, n_pix, labels_copy](Node<T>& self) {
    Node<T>* nx = self.parents[0];
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const T* lp2 = nx->value.ptr();
    const int32_t* yp2 = labels_copy.ptr();
    T* gx = nx->grad.ptr();
    const T gscale = self.grad.data[0] / static_cast<T>(n_pix);
    parallel_for(B, 1, [&](int64_t blo, int64_t bhi) {
      for (int64_t b = blo; b < bhi; ++b)
        for (int64_t p = 0; p < P; ++p) {
          const int64_t base = (b * C) * P + p;
          T m = lp2[base];
          for (int64_t c = 1; c < C; ++c) m = std::max(m, lp2[base + c * P]);
          T z = T(0);
          for (int64_t c = 0; c < C; ++c) z += std::exp(lp2[base + c * P] - m);
          const T rz = T(1) / z;
          const int64_t y = yp2[b * P + p];
          for (int64_t c = 0; c < C; ++c) {
            const T prob = std::exp(lp2[base + c * P] - m) * rz;
            gx[base + c * P] += gscale * (prob - (c == y ? T(1) : T(0)));
          }
        }
    });
  });
}

// ---------------------------------------------------------------------------
// Common index-map builders
// ---------------------------------------------------------------------------

namespace maps {

/// (B, H, W, C) cyclic roll by (dy, dx): out[y][x] = in[(y+dy) mod H][(x+dx) mod W].
IndexMapPtr roll(int64_t B, int64_t H, int64_t W, int64_t C, int64_t dy, int64_t dx);

/// (B, H, W, C) -> (B*nWin, ws*ws, C) row-major over window grid.
IndexMapPtr window_partition(int64_t B, int64_t H, int64_t W, int64_t C, int64_t ws);

/// Inverse of window_partition.
IndexMapPtr window_reverse(int64_t B, int64_t H, int64_t W, int64_t C, int64_t ws);

/// (B, H, W, C) -> (B, H/2, W/2, 4C); concat order (0,0), (1,0), (0,1), (1,1).
IndexMapPtr merge2x2(int64_t B, int64_t H, int64_t W, int64_t C);

/// (B, H, W, C) -> (B, pH, pW, C/p^2): out[b][h*p+i][w*p+j][c] = in[b][h][w][(i*p+j)*(C/p^2)+c].
IndexMapPtr expand_rearrange(int64_t B, int64_t H, int64_t W, int64_t C, int64_t p);

/// (B, Cin, H, W) -> (B, H/p, W/p, p*p*Cin); token feature order (i, j, cin).
IndexMapPtr patchify(int64_t B, int64_t Cin, int64_t H, int64_t W, int64_t p);

/// (BW, S, h*dh) -> (BW, h, S, dh).
IndexMapPtr split_heads(int64_t BW, int64_t S, int64_t heads, int64_t dh);

/// (BW, h, S, dh) -> (BW, S, h*dh).
IndexMapPtr merge_heads(int64_t BW, int64_t S, int64_t heads, int64_t dh);

/// (B, H, W, C) -> (B, C, H, W).
IndexMapPtr bhwc_to_bchw(int64_t B, int64_t H, int64_t W, int64_t C);

/// ((2w-1)^2, heads) relative-position table -> (heads, w^2, w^2).
IndexMapPtr relative_bias(int64_t window, int64_t heads);

/// (B, H, W) shift by (dy, dx) with replicated edges: out[y][x] = in[clamp(y+dy)][clamp(x+dx)].
IndexMapPtr shift_replicate(int64_t B, int64_t H, int64_t W, int64_t dy, int64_t dx);

}  // namespace maps

}  // namespace msunet
