#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "ecgnat/tensor.hpp"
#include "ecgnat/threadpool.hpp"

// Primitive tensor ops. Each op computes its forward value eagerly and, when
// a graph is active and an input requires grad, records the adjoint as a
// closure on the tape. Kernels parallelize over single-writer output ranges
// only, so values are schedule-independent.

namespace ecgnat {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
inline void ensure_grad_buf(TensorData<T>& td) {
  if (td.grad.empty()) td.grad.assign(td.value.size(), T(0));
}

namespace detail {

template <typename T>
inline void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                          " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& x, FwdFn fwd, BwdFn bwd) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  ThreadPool::parallel_for(n, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) ov[i] = fwd(xv[i]);
  });
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), bwd] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      const int64_t n = int64_t(xd->value.size());
      ThreadPool::parallel_for(n, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i)
          xd->grad[size_t(i)] += od->grad[size_t(i)] * bwd(xd->value[size_t(i)], od->value[size_t(i)]);
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  const T *av = a.data(), *bv = b.data();
  T* ov = out.data();
  ThreadPool::parallel_for(n, [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) ov[i] = av[i] + bv[i];
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (!has_out_grad(od)) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        accumulate(ad->grad, od->grad);
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        accumulate(bd->grad, od->grad);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  const T *av = a.data(), *bv = b.data();
  T* ov = out.data();
  ThreadPool::parallel_for(n, [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) ov[i] = av[i] - bv[i];
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (!has_out_grad(od)) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        accumulate(ad->grad, od->grad);
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  const T *av = a.data(), *bv = b.data();
  T* ov = out.data();
  ThreadPool::parallel_for(n, [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) ov[i] = av[i] * bv[i];
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (!has_out_grad(od)) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += od->grad[i] * bd->value[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] += od->grad[i] * ad->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (!has_out_grad(od)) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += od->grad[i] / bd->value[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (size_t i = 0; i < bd->grad.size(); ++i)
          bd->grad[i] -= od->grad[i] * ad->value[i] / (bd->value[i] * bd->value[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // exact erf form
  const T inv_sqrt2 = T(0.7071067811865475244);
  const T inv_sqrt2pi = T(0.3989422804014326779);
  return unary_op(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
  for (int64_t i = 0; i < x.numel(); ++i)
    check(x.data()[i] > T(0), "log: non-positive input at element " + std::to_string(i));
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  for (int64_t i = 0; i < x.numel(); ++i)
    check(x.data()[i] >= T(0), "sqrt: negative input at element " + std::to_string(i));
  return unary_op(x, [](T v) { return std::sqrt(v); },
                  [](T, T y) { return T(0.5) / std::max(y, std::numeric_limits<T>::min()); });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D inputs, got " + shape_str(a.shape()) +
                                                  " and " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  check_shape(K == K2, "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out({M, N});
  // one un-chunked GEMM per product: Eigen's panel kernels round remainder
  // rows differently depending on the block height, so splitting the row
  // range across threads would make results depend on the thread count
  Eigen::Map<const MatRM<T>> A(a.data(), M, K);
  Eigen::Map<const MatRM<T>> B(b.data(), K, N);
  Eigen::Map<MatRM<T>> C(out.data(), M, N);
  C.noalias() = A * B;
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr(), M, K, N] {
      if (!has_out_grad(od)) return;
      Eigen::Map<const MatRM<T>> dC(od->grad.data(), M, N);
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        Eigen::Map<const MatRM<T>> B(bd->value.data(), K, N);
        Eigen::Map<MatRM<T>> dA(ad->grad.data(), M, K);
        dA.noalias() += dC * B.transpose();
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        Eigen::Map<const MatRM<T>> A(ad->value.data(), M, K);
        Eigen::Map<MatRM<T>> dB(bd->grad.data(), K, N);
        dB.noalias() += A.transpose() * dC;
      }
    });
  }
  return out;
}

// [B,M,K] x [B,K,N] -> [B,M,N]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.ndim() == 3 && b.ndim() == 3, "bmm: expects 3-D inputs, got " + shape_str(a.shape()) +
                                                  " and " + shape_str(b.shape()));
  const int64_t Bn = a.dim(0), M = a.dim(1), K = a.dim(2);
  check_shape(b.dim(0) == Bn && b.dim(1) == K,
              "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int64_t N = b.dim(2);
  Tensor<T> out({Bn, M, N});
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  ThreadPool::parallel_for(Bn, [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) {
      Eigen::Map<const MatRM<T>> A(av + i * M * K, M, K);
      Eigen::Map<const MatRM<T>> B(bv + i * K * N, K, N);
      Eigen::Map<MatRM<T>> C(ov + i * M * N, M, N);
      C.noalias() = A * B;
    }
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    g->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr(), Bn, M, K, N] {
      if (!has_out_grad(od)) return;
      if (ad->requires_grad) ensure_grad_buf(*ad);
      if (bd->requires_grad) ensure_grad_buf(*bd);
      ThreadPool::parallel_for(Bn, [&](int64_t s, int64_t e) {
        for (int64_t i = s; i < e; ++i) {
          Eigen::Map<const MatRM<T>> dC(od->grad.data() + i * M * N, M, N);
          if (ad->requires_grad) {
            Eigen::Map<const MatRM<T>> B(bd->value.data() + i * K * N, K, N);
            Eigen::Map<MatRM<T>> dA(ad->grad.data() + i * M * K, M, K);
            dA.noalias() += dC * B.transpose();
          }
          if (bd->requires_grad) {
            Eigen::Map<const MatRM<T>> A(ad->value.data() + i * M * K, M, K);
            Eigen::Map<MatRM<T>> dB(bd->grad.data() + i * K * N, K, N);
            dB.noalias() += A.transpose() * dC;
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  check_shape(shape_numel(new_shape) == x.numel(),
              "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.values());
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr()] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      accumulate(xd->grad, od->grad);
    });
  }
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// out linear index -> in linear index map for a permutation
template <typename Fn>
inline void for_each_permuted(const Shape& out_shape, const std::vector<int64_t>& in_strides_permuted,
                              int64_t begin, int64_t end, Fn&& fn) {
  const size_t nd = out_shape.size();
  const auto out_strides = row_major_strides(out_shape);
  for (int64_t oi = begin; oi < end; ++oi) {
    int64_t rem = oi, ii = 0;
    for (size_t d = 0; d < nd; ++d) {
      const int64_t c = rem / out_strides[d];
      rem -= c * out_strides[d];
      ii += c * in_strides_permuted[d];
    }
    fn(oi, ii);
  }
}

}  // namespace detail

// transpose/permute: out axis d takes input axis perm[d]
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& perm) {
  check_shape(perm.size() == x.ndim(), "permute: order has wrong rank");
  std::vector<bool> seen(perm.size(), false);
  for (size_t p : perm) {
    check_shape(p < perm.size() && !seen[p], "permute: invalid axis order");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  const auto in_strides = detail::row_major_strides(x.shape());
  std::vector<int64_t> strides_perm(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) {
    out_shape[d] = x.shape()[perm[d]];
    strides_perm[d] = in_strides[perm[d]];
  }
  Tensor<T> out(out_shape);
  const T* xv = x.data();
  T* ov = out.data();
  ThreadPool::parallel_for(out.numel(), [&](int64_t b, int64_t e) {
    detail::for_each_permuted(out_shape, strides_perm, b, e, [&](int64_t oi, int64_t ii) { ov[oi] = xv[ii]; });
  });
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), out_shape, strides_perm] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      detail::for_each_permuted(out_shape, strides_perm, 0, int64_t(od->grad.size()),
                                [&](int64_t oi, int64_t ii) { xd->grad[size_t(ii)] += od->grad[size_t(oi)]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  check_shape(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check_shape(axis < s0.size(), "concat: axis out of range");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    check_shape(p.ndim() == s0.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s0.size(); ++d)
      check_shape(d == axis || p.shape()[d] == s0[d], "concat: extent mismatch on axis " + std::to_string(d));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  Tensor<T> out(out_shape);

  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  int64_t off = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const int64_t pa = p.shape()[axis];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + off) * inner, p.data() + o * pa * inner,
                  size_t(pa * inner) * sizeof(T));
    off += pa;
    any_grad = any_grad || p.requires_grad();
  }
  Graph<T>* g = Graph<T>::active();
  if (g && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> pds;
    std::vector<int64_t> extents;
    for (const auto& p : parts) {
      pds.push_back(p.ptr());
      extents.push_back(p.shape()[axis]);
    }
    g->record([pds, extents, od = out.ptr(), outer, inner, axis_total] {
      if (!has_out_grad(od)) return;
      int64_t off = 0;
      for (size_t pi = 0; pi < pds.size(); ++pi) {
        const int64_t pa = extents[pi];
        if (pds[pi]->requires_grad) {
          ensure_grad_buf(*pds[pi]);
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = od->grad.data() + (o * axis_total + off) * inner;
            T* dst = pds[pi]->grad.data() + o * pa * inner;
            for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
          }
        }
        off += pa;
      }
    });
  }
  return out;
}

// index-gather along one axis: output extent on `axis` becomes idx.size()
template <typename T>
Tensor<T> gather(const Tensor<T>& x, size_t axis, const std::vector<int64_t>& idx) {
  check_shape(axis < x.ndim(), "gather: axis out of range");
  const int64_t extent = x.shape()[axis];
  for (int64_t i : idx)
    check_shape(i >= 0 && i < extent,
                "gather: index " + std::to_string(i) + " out of range for extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[axis] = int64_t(idx.size());
  Tensor<T> out(out_shape);
  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (size_t d = axis + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
  const int64_t k = int64_t(idx.size());
  const T* xv = x.data();
  T* ov = out.data();
  ThreadPool::parallel_for(outer, [&](int64_t s, int64_t e) {
    for (int64_t o = s; o < e; ++o)
      for (int64_t j = 0; j < k; ++j)
        std::memcpy(ov + (o * k + j) * inner, xv + (o * extent + idx[size_t(j)]) * inner,
                    size_t(inner) * sizeof(T));
  });
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), idx, outer, inner, extent, k] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < k; ++j) {
          const T* src = od->grad.data() + (o * k + j) * inner;
          T* dst = xd->grad.data() + (o * extent + idx[size_t(j)]) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// contiguous slice along one axis
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, size_t axis, int64_t start, int64_t len) {
  check_shape(axis < x.ndim(), "narrow: axis out of range");
  check_shape(start >= 0 && len > 0 && start + len <= x.shape()[axis],
              "narrow: window [" + std::to_string(start) + "," + std::to_string(start + len) +
                  ") exceeds extent " + std::to_string(x.shape()[axis]));
  std::vector<int64_t> idx(static_cast<size_t>(len));
  for (int64_t i = 0; i < len; ++i) idx[size_t(i)] = start + i;
  return gather(x, axis, idx);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> reduce_lastdim(const Tensor<T>& x, bool mean) {
  check_shape(x.ndim() >= 1, "reduce: rank 0");
  const int64_t D = x.shape().back();
  const int64_t R = x.numel() / D;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  const T scale = mean ? T(1) / T(D) : T(1);
  const T* xv = x.data();
  T* ov = out.data();
  ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
    for (int64_t r = s; r < e; ++r) {
      T acc = T(0);
      for (int64_t c = 0; c < D; ++c) acc += xv[r * D + c];
      ov[r] = acc * scale;
    }
  });
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), R, D, scale] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      for (int64_t r = 0; r < R; ++r) {
        const T gy = od->grad[size_t(r)] * scale;
        for (int64_t c = 0; c < D; ++c) xd->grad[size_t(r * D + c)] += gy;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, bool mean) {
  const int64_t n = x.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  const T scale = mean ? T(1) / T(n) : T(1);
  Tensor<T> out = Tensor<T>::scalar(acc * scale);
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), scale] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      const T gy = od->grad[0] * scale;
      for (auto& gv : xd->grad) gv += gy;
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum_lastdim(const Tensor<T>& x) {
  return detail::reduce_lastdim(x, false);
}
template <typename T>
Tensor<T> reduce_mean_lastdim(const Tensor<T>& x) {
  return detail::reduce_lastdim(x, true);
}
template <typename T>
Tensor<T> reduce_sum_all(const Tensor<T>& x) {
  return detail::reduce_all(x, false);
}
template <typename T>
Tensor<T> reduce_mean_all(const Tensor<T>& x) {
  return detail::reduce_all(x, true);
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

// x[..., D] + v[D]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  check_shape(v.ndim() == 1 && x.ndim() >= 1 && x.shape().back() == v.dim(0),
              "add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const int64_t D = v.dim(0);
  const int64_t R = x.numel() / D;
  Tensor<T> out(x.shape());
  const T *xv = x.data(), *vv = v.data();
  T* ov = out.data();
  ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
    for (int64_t r = s; r < e; ++r)
      for (int64_t c = 0; c < D; ++c) ov[r * D + c] = xv[r * D + c] + vv[c];
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (x.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    g->record([xd = x.ptr(), vd = v.ptr(), od = out.ptr(), R, D] {
      if (!has_out_grad(od)) return;
      if (xd->requires_grad) {
        ensure_grad_buf(*xd);
        accumulate(xd->grad, od->grad);
      }
      if (vd->requires_grad) {
        ensure_grad_buf(*vd);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < D; ++c) vd->grad[size_t(c)] += od->grad[size_t(r * D + c)];
      }
    });
  }
  return out;
}

// x[R, C] - s[R] broadcast down columns
template <typename T>
Tensor<T> sub_colvec(const Tensor<T>& x, const Tensor<T>& s) {
  check_shape(x.ndim() == 2 && s.ndim() == 1 && x.dim(0) == s.dim(0),
              "sub_colvec: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  const int64_t R = x.dim(0), C = x.dim(1);
  Tensor<T> out(x.shape());
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) out.data()[r * C + c] = x.data()[r * C + c] - s.data()[r];
  Graph<T>* g = Graph<T>::active();
  if (g && (x.requires_grad() || s.requires_grad())) {
    out.set_requires_grad(true);
    g->record([xd = x.ptr(), sd = s.ptr(), od = out.ptr(), R, C] {
      if (!has_out_grad(od)) return;
      if (xd->requires_grad) {
        ensure_grad_buf(*xd);
        accumulate(xd->grad, od->grad);
      }
      if (sd->requires_grad) {
        ensure_grad_buf(*sd);
        for (int64_t r = 0; r < R; ++r) {
          T acc = T(0);
          for (int64_t c = 0; c < C; ++c) acc += od->grad[size_t(r * C + c)];
          sd->grad[size_t(r)] -= acc;
        }
      }
    });
  }
  return out;
}

// rows scaled to unit L2 norm; rows with norm <= floor are scaled by 1/floor
// (a zero row stays zero, which is the guarded cosine convention)
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T floor = T(1e-12)) {
  check_shape(x.ndim() == 2, "l2_normalize_rows: expects 2-D, got " + shape_str(x.shape()));
  const int64_t R = x.dim(0), C = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> norms(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    T ss = T(0);
    for (int64_t c = 0; c < C; ++c) {
      const T v = x.data()[r * C + c];
      ss += v * v;
    }
    norms[size_t(r)] = std::max(std::sqrt(ss), floor);
    const T inv = T(1) / norms[size_t(r)];
    for (int64_t c = 0; c < C; ++c) out.data()[r * C + c] = x.data()[r * C + c] * inv;
  }
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), norms, floor, R, C] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      for (int64_t r = 0; r < R; ++r) {
        const T n = norms[size_t(r)];
        const T inv = T(1) / n;
        // recover the clamp branch: if the true norm hit the floor, the
        // denominator is a constant
        T ss = T(0);
        for (int64_t c = 0; c < C; ++c) {
          const T v = xd->value[size_t(r * C + c)];
          ss += v * v;
        }
        const bool clamped = std::sqrt(ss) < n || (std::sqrt(ss) <= floor && n == floor);
        if (clamped) {
          for (int64_t c = 0; c < C; ++c) xd->grad[size_t(r * C + c)] += od->grad[size_t(r * C + c)] * inv;
        } else {
          T dot = T(0);
          for (int64_t c = 0; c < C; ++c) dot += od->grad[size_t(r * C + c)] * od->value[size_t(r * C + c)];
          for (int64_t c = 0; c < C; ++c)
            xd->grad[size_t(r * C + c)] +=
                (od->grad[size_t(r * C + c)] - od->value[size_t(r * C + c)] * dot) * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv1d / conv_transpose1d
// ---------------------------------------------------------------------------

inline int64_t conv1d_out_len(int64_t L, int64_t K, int64_t stride, int64_t pad) {
  return (L + 2 * pad - K) / stride + 1;
}

inline int64_t conv_transpose1d_out_len(int64_t L, int64_t K, int64_t stride, int64_t pad) {
  return (L - 1) * stride - 2 * pad + K;
}

// input [B,Ci,L] or [Ci,L]; weight [Co,Ci,K]; bias [Co] optional.
// Cross-correlation semantics, symmetric zero padding.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
  const bool batched = input.ndim() == 3;
  check_shape(batched || input.ndim() == 2, "conv1d: input must be [C,L] or [B,C,L], got " + shape_str(input.shape()));
  check_shape(weight.ndim() == 3, "conv1d: weight must be [Co,Ci,K], got " + shape_str(weight.shape()));
  const int64_t B = batched ? input.dim(0) : 1;
  const int64_t Ci = batched ? input.dim(1) : input.dim(0);
  const int64_t L = batched ? input.dim(2) : input.dim(1);
  const int64_t Co = weight.dim(0), Wci = weight.dim(1), K = weight.dim(2);
  check_shape(Ci == Wci, "conv1d: input channels " + std::to_string(Ci) + " != weight channels " +
                             std::to_string(Wci));
  if (bias.defined())
    check_shape(bias.ndim() == 1 && bias.dim(0) == Co, "conv1d: bias must be [Co], got " + shape_str(bias.shape()));
  check(stride >= 1, "conv1d: stride must be >= 1");
  check(pad >= 0, "conv1d: pad must be >= 0");
  check_shape(L + 2 * pad >= K, "conv1d: length " + std::to_string(L) + " + 2*pad " + std::to_string(pad) +
                                    " shorter than kernel " + std::to_string(K));
  const int64_t Lo = conv1d_out_len(L, K, stride, pad);

  Shape out_shape = batched ? Shape{B, Co, Lo} : Shape{Co, Lo};
  Tensor<T> out(out_shape);
  const T* xv = input.data();
  const T* wv = weight.data();
  const T* bv = bias.defined() ? bias.data() : nullptr;
  T* ov = out.data();

  ThreadPool::parallel_for(B * Co, [&](int64_t s, int64_t e) {
    for (int64_t bc = s; bc < e; ++bc) {
      const int64_t b = bc / Co, co = bc % Co;
      for (int64_t l = 0; l < Lo; ++l) {
        T acc = bv ? bv[co] : T(0);
        const int64_t base = l * stride - pad;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const T* xrow = xv + (b * Ci + ci) * L;
          const T* wrow = wv + (co * Ci + ci) * K;
          const int64_t t0 = std::max<int64_t>(0, -base);
          const int64_t t1 = std::min<int64_t>(K, L - base);
          for (int64_t t = t0; t < t1; ++t) acc += xrow[base + t] * wrow[t];
        }
        ov[(b * Co + co) * Lo + l] = acc;
      }
    }
  });

  Graph<T>* g = Graph<T>::active();
  const bool bias_grad = bias.defined() && bias.requires_grad();
  if (g && (input.requires_grad() || weight.requires_grad() || bias_grad)) {
    out.set_requires_grad(true);
    auto biasd = bias.defined() ? bias.ptr() : nullptr;
    g->record([xd = input.ptr(), wd = weight.ptr(), biasd, od = out.ptr(), B, Ci, L, Co, K, Lo, stride, pad] {
      if (!has_out_grad(od)) return;
      const T* gy = od->grad.data();
      if (xd->requires_grad) {
        ensure_grad_buf(*xd);
        ThreadPool::parallel_for(B * Ci, [&](int64_t s, int64_t e) {
          for (int64_t bc = s; bc < e; ++bc) {
            const int64_t b = bc / Ci, ci = bc % Ci;
            T* gx = xd->grad.data() + (b * Ci + ci) * L;
            for (int64_t co = 0; co < Co; ++co) {
              const T* wrow = wd->value.data() + (co * Ci + ci) * K;
              const T* gyrow = gy + (b * Co + co) * Lo;
              for (int64_t l = 0; l < Lo; ++l) {
                const int64_t base = l * stride - pad;
                const T g0 = gyrow[l];
                const int64_t t0 = std::max<int64_t>(0, -base);
                const int64_t t1 = std::min<int64_t>(K, L - base);
                for (int64_t t = t0; t < t1; ++t) gx[base + t] += g0 * wrow[t];
              }
            }
          }
        });
      }
      if (wd->requires_grad) {
        ensure_grad_buf(*wd);
        ThreadPool::parallel_for(Co * Ci, [&](int64_t s, int64_t e) {
          for (int64_t cc = s; cc < e; ++cc) {
            const int64_t co = cc / Ci, ci = cc % Ci;
            T* gw = wd->grad.data() + (co * Ci + ci) * K;
            for (int64_t b = 0; b < B; ++b) {
              const T* xrow = xd->value.data() + (b * Ci + ci) * L;
              const T* gyrow = gy + (b * Co + co) * Lo;
              for (int64_t l = 0; l < Lo; ++l) {
                const int64_t base = l * stride - pad;
                const T g0 = gyrow[l];
                const int64_t t0 = std::max<int64_t>(0, -base);
                const int64_t t1 = std::min<int64_t>(K, L - base);
                for (int64_t t = t0; t < t1; ++t) gw[t] += g0 * xrow[base + t];
              }
            }
          }
        });
      }
      if (biasd && biasd->requires_grad) {
        ensure_grad_buf(*biasd);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            const T* gyrow = gy + (b * Co + co) * Lo;
            for (int64_t l = 0; l < Lo; ++l) acc += gyrow[l];
            biasd->grad[size_t(co)] += acc;
          }
      }
    });
  }
  return out;
}

// input [B,Ci,L] or [Ci,L]; weight [Ci,Co,K]; adjoint of conv1d with the
// same stride/pad parameters.
template <typename T>
Tensor<T> conv_transpose1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int64_t stride, int64_t pad) {
  const bool batched = input.ndim() == 3;
  check_shape(batched || input.ndim() == 2,
              "conv_transpose1d: input must be [C,L] or [B,C,L], got " + shape_str(input.shape()));
  check_shape(weight.ndim() == 3, "conv_transpose1d: weight must be [Ci,Co,K], got " + shape_str(weight.shape()));
  const int64_t B = batched ? input.dim(0) : 1;
  const int64_t Ci = batched ? input.dim(1) : input.dim(0);
  const int64_t L = batched ? input.dim(2) : input.dim(1);
  const int64_t Wci = weight.dim(0), Co = weight.dim(1), K = weight.dim(2);
  check_shape(Ci == Wci, "conv_transpose1d: input channels " + std::to_string(Ci) + " != weight channels " +
                             std::to_string(Wci));
  if (bias.defined())
    check_shape(bias.ndim() == 1 && bias.dim(0) == Co,
                "conv_transpose1d: bias must be [Co], got " + shape_str(bias.shape()));
  check(stride >= 1, "conv_transpose1d: stride must be >= 1");
  const int64_t Lo = conv_transpose1d_out_len(L, K, stride, pad);
  check_shape(Lo >= 1, "conv_transpose1d: output length would be " + std::to_string(Lo));

  Shape out_shape = batched ? Shape{B, Co, Lo} : Shape{Co, Lo};
  Tensor<T> out(out_shape);
  const T* xv = input.data();
  const T* wv = weight.data();
  const T* bv = bias.defined() ? bias.data() : nullptr;
  T* ov = out.data();

  ThreadPool::parallel_for(B * Co, [&](int64_t s, int64_t e) {
    for (int64_t bc = s; bc < e; ++bc) {
      const int64_t b = bc / Co, co = bc % Co;
      T* orow = ov + (b * Co + co) * Lo;
      for (int64_t p = 0; p < Lo; ++p) orow[p] = bv ? bv[co] : T(0);
      for (int64_t p = 0; p < Lo; ++p) {
        T acc = T(0);
        for (int64_t t = 0; t < K; ++t) {
          const int64_t num = p + pad - t;
          if (num < 0 || num % stride != 0) continue;
          const int64_t l = num / stride;
          if (l >= L) continue;
          for (int64_t ci = 0; ci < Ci; ++ci)
            acc += xv[(b * Ci + ci) * L + l] * wv[(ci * Co + co) * K + t];
        }
        orow[p] += acc;
      }
    }
  });

  Graph<T>* g = Graph<T>::active();
  const bool bias_grad = bias.defined() && bias.requires_grad();
  if (g && (input.requires_grad() || weight.requires_grad() || bias_grad)) {
    out.set_requires_grad(true);
    auto biasd = bias.defined() ? bias.ptr() : nullptr;
    g->record([xd = input.ptr(), wd = weight.ptr(), biasd, od = out.ptr(), B, Ci, L, Co, K, Lo, stride, pad] {
      if (!has_out_grad(od)) return;
      const T* gy = od->grad.data();
      if (xd->requires_grad) {
        ensure_grad_buf(*xd);
        ThreadPool::parallel_for(B * Ci, [&](int64_t s, int64_t e) {
          for (int64_t bc = s; bc < e; ++bc) {
            const int64_t b = bc / Ci, ci = bc % Ci;
            T* gx = xd->grad.data() + (b * Ci + ci) * L;
            for (int64_t l = 0; l < L; ++l) {
              T acc = T(0);
              for (int64_t co = 0; co < Co; ++co) {
                const T* gyrow = gy + (b * Co + co) * Lo;
                const T* wrow = wd->value.data() + (ci * Co + co) * K;
                for (int64_t t = 0; t < K; ++t) {
                  const int64_t p = l * stride + t - pad;
                  if (p >= 0 && p < Lo) acc += gyrow[p] * wrow[t];
                }
              }
              gx[l] += acc;
            }
          }
        });
      }
      if (wd->requires_grad) {
        ensure_grad_buf(*wd);
        ThreadPool::parallel_for(Ci * Co, [&](int64_t s, int64_t e) {
          for (int64_t cc = s; cc < e; ++cc) {
            const int64_t ci = cc / Co, co = cc % Co;
            T* gw = wd->grad.data() + (ci * Co + co) * K;
            for (int64_t t = 0; t < K; ++t) {
              T acc = T(0);
              for (int64_t b = 0; b < B; ++b) {
                const T* xrow = xd->value.data() + (b * Ci + ci) * L;
                const T* gyrow = gy + (b * Co + co) * Lo;
                for (int64_t l = 0; l < L; ++l) {
                  const int64_t p = l * stride + t - pad;
                  if (p >= 0 && p < Lo) acc += xrow[l] * gyrow[p];
                }
              }
              gw[t] += acc;
            }
          }
        });
      }
      if (biasd && biasd->requires_grad) {
        ensure_grad_buf(*biasd);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            const T* gyrow = gy + (b * Co + co) * Lo;
            for (int64_t p = 0; p < Lo; ++p) acc += gyrow[p];
            biasd->grad[size_t(co)] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm / softmax
// ---------------------------------------------------------------------------

// normalizes the last axis to zero mean / unit variance, then applies the
// gamma/beta affine
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  check_shape(x.ndim() >= 1, "layer_norm: rank 0");
  const int64_t D = x.shape().back();
  check_shape(gamma.ndim() == 1 && gamma.dim(0) == D && beta.ndim() == 1 && beta.dim(0) == D,
              "layer_norm: gamma/beta must be [" + std::to_string(D) + "]");
  const int64_t R = x.numel() / D;
  Tensor<T> out(x.shape());
  auto xn = std::make_shared<std::vector<T>>(size_t(R * D));     // normalized pre-affine
  auto inv_std = std::make_shared<std::vector<T>>(size_t(R));
  const T* xv = x.data();
  const T *gv = gamma.data(), *bvv = beta.data();
  T* ov = out.data();
  ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
    for (int64_t r = s; r < e; ++r) {
      T mean = T(0);
      for (int64_t c = 0; c < D; ++c) mean += xv[r * D + c];
      mean /= T(D);
      T var = T(0);
      for (int64_t c = 0; c < D; ++c) {
        const T d = xv[r * D + c] - mean;
        var += d * d;
      }
      var /= T(D);
      const T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[size_t(r)] = inv;
      for (int64_t c = 0; c < D; ++c) {
        const T n = (xv[r * D + c] - mean) * inv;
        (*xn)[size_t(r * D + c)] = n;
        ov[r * D + c] = gv[c] * n + bvv[c];
      }
    }
  });
  Graph<T>* g = Graph<T>::active();
  if (g && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    g->record([xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), od = out.ptr(), xn, inv_std, R, D] {
      if (!has_out_grad(od)) return;
      const T* gy = od->grad.data();
      if (xd->requires_grad) {
        ensure_grad_buf(*xd);
        ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
          for (int64_t r = s; r < e; ++r) {
            T mean_t = T(0), mean_tn = T(0);
            for (int64_t c = 0; c < D; ++c) {
              const T t = gy[r * D + c] * gd->value[size_t(c)];
              mean_t += t;
              mean_tn += t * (*xn)[size_t(r * D + c)];
            }
            mean_t /= T(D);
            mean_tn /= T(D);
            const T inv = (*inv_std)[size_t(r)];
            for (int64_t c = 0; c < D; ++c) {
              const T t = gy[r * D + c] * gd->value[size_t(c)];
              xd->grad[size_t(r * D + c)] += inv * (t - mean_t - (*xn)[size_t(r * D + c)] * mean_tn);
            }
          }
        });
      }
      if (gd->requires_grad) {
        ensure_grad_buf(*gd);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < D; ++c) gd->grad[size_t(c)] += gy[r * D + c] * (*xn)[size_t(r * D + c)];
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < D; ++c) bd->grad[size_t(c)] += gy[r * D + c];
      }
    });
  }
  return out;
}

// softmax over the last axis, guarded by max subtraction
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  check_shape(x.ndim() >= 1, "softmax_lastdim: rank 0");
  const int64_t D = x.shape().back();
  const int64_t R = x.numel() / D;
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
    for (int64_t r = s; r < e; ++r) {
      T m = xv[r * D];
      for (int64_t c = 1; c < D; ++c) m = std::max(m, xv[r * D + c]);
      T sum = T(0);
      for (int64_t c = 0; c < D; ++c) {
        const T ev = std::exp(xv[r * D + c] - m);
        ov[r * D + c] = ev;
        sum += ev;
      }
      const T inv = T(1) / sum;
      for (int64_t c = 0; c < D; ++c) ov[r * D + c] *= inv;
    }
  });
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    Graph<T>::active()->record([xd = x.ptr(), od = out.ptr(), R, D] {
      if (!has_out_grad(od)) return;
      ensure_grad_buf(*xd);
      ThreadPool::parallel_for(R, [&](int64_t s, int64_t e) {
        for (int64_t r = s; r < e; ++r) {
          T dot = T(0);
          for (int64_t c = 0; c < D; ++c) dot += od->grad[size_t(r * D + c)] * od->value[size_t(r * D + c)];
          for (int64_t c = 0; c < D; ++c)
            xd->grad[size_t(r * D + c)] +=
                od->value[size_t(r * D + c)] * (od->grad[size_t(r * D + c)] - dot);
        }
      });
    });
  }
  return out;
}

// linear layer convenience: x[R,C] value-projected by w[C,N] plus bias
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  return b.defined() ? add_rowvec(y, b) : y;
}

}  // namespace ecgnat
