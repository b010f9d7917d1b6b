#pragma once

#include <chrono>
#include <fstream>
#include <iomanip>

#include "ecgnat/ops.hpp"

// 1D neighborhood attention: each token attends to the contiguous window of
// min(k, n) positions centered on it, shifted inward at the boundaries so the
// softmax support is the same size everywhere. Logits carry a learnable
// relative-position bias added before the 1/sqrt(d) scaling:
//
//   out_i = softmax_j( (Q_i . K_{mu_j(i)} + B[mu_j(i) - i]) / sqrt(d) ) . V
//
// The fused kernel is O(n*k*d) per head and never materializes an n x n
// intermediate. na_reference computes the same function as masked global
// attention (O(n^2)), composed from the generic autodiff primitives, and is
// the test oracle for both values and gradients.

namespace ecgnat {

struct NeighborhoodSpec {
  int64_t k;
  int64_t n_heads;
  int64_t head_dim;

  NeighborhoodSpec(int64_t k_, int64_t n_heads_, int64_t head_dim_)
      : k(k_), n_heads(n_heads_), head_dim(head_dim_) {
    check(k >= 1 && k % 2 == 1, "NeighborhoodSpec: window k must be odd and >= 1, got " + std::to_string(k));
    check(n_heads >= 1, "NeighborhoodSpec: n_heads must be positive");
    check(head_dim >= 1, "NeighborhoodSpec: head_dim must be positive");
  }
};

inline int64_t window_len(int64_t k, int64_t n) { return std::min(k, n); }

// first index of token i's window under the clamp rule
inline int64_t window_start(int64_t i, int64_t k, int64_t n) {
  const int64_t kk = window_len(k, n);
  return std::clamp(i - (k - 1) / 2, int64_t(0), n - kk);
}

inline std::vector<int64_t> neighbor_indices(int64_t i, int64_t k, int64_t n) {
  check(k >= 1 && k % 2 == 1, "neighbor_indices: window k must be odd and >= 1, got " + std::to_string(k));
  check(n >= 1, "neighbor_indices: n must be positive");
  check(i >= 0 && i < n, "neighbor_indices: position " + std::to_string(i) + " out of range for length " +
                             std::to_string(n));
  const int64_t kk = window_len(k, n);
  const int64_t s = window_start(i, k, n);
  std::vector<int64_t> out(static_cast<size_t>(kk));
  for (int64_t j = 0; j < kk; ++j) out[size_t(j)] = s + j;
  return out;
}

// materialized windows for tests; the kernel itself never builds this
struct NeighborMap {
  int64_t k = 0;
  int64_t n = 0;
  std::vector<std::vector<int64_t>> neighbors;

  static NeighborMap build(int64_t k, int64_t n) {
    NeighborMap m;
    m.k = k;
    m.n = n;
    m.neighbors.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) m.neighbors.push_back(neighbor_indices(i, k, n));
    return m;
  }
};

namespace detail {

// Verification hook: when set, na_forward's recorded backward scales the Q
// adjoint by a small factor. The verify suite flips this on to prove its
// gradient checks can actually catch a broken kernel, then restores it.
inline bool& na_backward_fault() {
  static bool fault = false;
  return fault;
}

template <typename T>
void na_check_args(const Tensor<T>& q, const Tensor<T>& k_t, const Tensor<T>& v, const Tensor<T>& bias,
                   int64_t k) {
  check(k >= 1 && k % 2 == 1, "na_forward: window k must be odd and >= 1, got " + std::to_string(k));
  check_shape(q.ndim() == 3 || q.ndim() == 4,
              "na_forward: Q must be [heads x n x d] or [batch x heads x n x d], got " + shape_str(q.shape()));
  check_shape(q.shape() == k_t.shape() && q.shape() == v.shape(),
              "na_forward: Q/K/V shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k_t.shape()) +
                  ", " + shape_str(v.shape()));
  const int64_t heads = q.ndim() == 4 ? q.dim(1) : q.dim(0);
  check_shape(bias.defined() && bias.ndim() == 2 && bias.dim(0) == heads && bias.dim(1) == 2 * k - 1,
              "na_forward: bias must be [heads x (2k-1)] = [" + std::to_string(heads) + "x" +
                  std::to_string(2 * k - 1) + "], got " + (bias.defined() ? shape_str(bias.shape()) : "none"));
}

}  // namespace detail

// Fused forward. Saves the attention weights for the recorded backward; the
// backward produces exact adjoints for Q, K, V, and the bias table in the
// same O(n*k*d) class.
template <typename T>
Tensor<T> na_forward(const Tensor<T>& q, const Tensor<T>& k_t, const Tensor<T>& v, const Tensor<T>& bias,
                     int64_t k) {
  detail::na_check_args(q, k_t, v, bias, k);
  const bool batched = q.ndim() == 4;
  const int64_t B = batched ? q.dim(0) : 1;
  const int64_t H = batched ? q.dim(1) : q.dim(0);
  const int64_t N = batched ? q.dim(2) : q.dim(1);
  const int64_t D = batched ? q.dim(3) : q.dim(2);
  const int64_t kk = window_len(k, N);
  const T inv_sqrt_d = T(1) / std::sqrt(T(D));

  Tensor<T> out(q.shape());
  auto weights = std::make_shared<std::vector<T>>(size_t(B * H * N * kk));

  const T* qv = q.data();
  const T* kv = k_t.data();
  const T* vv = v.data();
  const T* bv = bias.data();
  T* ov = out.data();
  T* wv = weights->data();

  ThreadPool::parallel_for(B * H * N, [&](int64_t r0, int64_t r1) {
    std::vector<T> logits(static_cast<size_t>(kk));
    for (int64_t row = r0; row < r1; ++row) {
      const int64_t i = row % N;
      const int64_t bh = row / N;
      const int64_t h = bh % H;
      const T* qrow = qv + row * D;
      const T* kbase = kv + bh * N * D;
      const T* vbase = vv + bh * N * D;
      const T* brow = bv + h * (2 * k - 1);
      const int64_t s = window_start(i, k, N);
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < kk; ++j) {
        const T* krow = kbase + (s + j) * D;
        T dot = T(0);
        for (int64_t c = 0; c < D; ++c) dot += qrow[c] * krow[c];
        const T logit = (dot + brow[(s + j - i) + (k - 1)]) * inv_sqrt_d;
        logits[size_t(j)] = logit;
        mx = std::max(mx, logit);
      }
      T sum = T(0);
      T* wrow = wv + row * kk;
      for (int64_t j = 0; j < kk; ++j) {
        const T e = std::exp(logits[size_t(j)] - mx);
        wrow[j] = e;
        sum += e;
      }
      const T inv_sum = T(1) / sum;
      T* orow = ov + row * D;
      for (int64_t c = 0; c < D; ++c) orow[c] = T(0);
      for (int64_t j = 0; j < kk; ++j) {
        const T w = wrow[j] * inv_sum;
        wrow[j] = w;
        const T* vrow = vbase + (s + j) * D;
        for (int64_t c = 0; c < D; ++c) orow[c] += w * vrow[c];
      }
    }
  });

  Graph<T>* g = Graph<T>::active();
  if (g && (q.requires_grad() || k_t.requires_grad() || v.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    g->record([qd = q.ptr(), kd = k_t.ptr(), vd = v.ptr(), bd = bias.ptr(), od = out.ptr(), weights, B, H, N,
               D, k, kk, inv_sqrt_d] {
      if (!has_out_grad(od)) return;
      const T* gy = od->grad.data();
      const T* wv = weights->data();
      const T fault_scale = detail::na_backward_fault() ? T(1.01) : T(1);

      if (qd->requires_grad) ensure_grad_buf(*qd);
      if (kd->requires_grad) ensure_grad_buf(*kd);
      if (vd->requires_grad) ensure_grad_buf(*vd);

      // scaled logit adjoints, kept for the bias reduction pass
      std::vector<T> dA(size_t(B * H * N * kk));

      // pass 1: per (batch, head) slice — K/V rows are scattered into, so
      // the query loop stays sequential inside one slice
      ThreadPool::parallel_for(B * H, [&](int64_t s0, int64_t s1) {
        for (int64_t bh = s0; bh < s1; ++bh) {
          T* gq = qd->requires_grad ? qd->grad.data() + bh * N * D : nullptr;
          T* gk = kd->requires_grad ? kd->grad.data() + bh * N * D : nullptr;
          T* gv = vd->requires_grad ? vd->grad.data() + bh * N * D : nullptr;
          const T* qbase = qd->value.data() + bh * N * D;
          const T* kbase = kd->value.data() + bh * N * D;
          const T* vbase = vd->value.data() + bh * N * D;
          for (int64_t i = 0; i < N; ++i) {
            const int64_t row = bh * N + i;
            const int64_t s = window_start(i, k, N);
            const T* gyrow = gy + row * D;
            const T* wrow = wv + row * kk;
            T* dArow = dA.data() + row * kk;
            // g_j = gy_i . V_{s+j};  dL_j = w_j (g_j - sum_j' w_j' g_j')
            T dot = T(0);
            for (int64_t j = 0; j < kk; ++j) {
              const T* vrow = vbase + (s + j) * D;
              T gj = T(0);
              for (int64_t c = 0; c < D; ++c) gj += gyrow[c] * vrow[c];
              dArow[j] = gj;
              dot += wrow[j] * gj;
            }
            for (int64_t j = 0; j < kk; ++j) dArow[j] = wrow[j] * (dArow[j] - dot) * inv_sqrt_d;

            if (gv) {
              for (int64_t j = 0; j < kk; ++j) {
                T* gvrow = gv + (s + j) * D;
                const T w = wrow[j];
                for (int64_t c = 0; c < D; ++c) gvrow[c] += w * gyrow[c];
              }
            }
            if (gq) {
              T* gqrow = gq + i * D;
              for (int64_t j = 0; j < kk; ++j) {
                const T* krow = kbase + (s + j) * D;
                const T a = dArow[j] * fault_scale;
                for (int64_t c = 0; c < D; ++c) gqrow[c] += a * krow[c];
              }
            }
            if (gk) {
              const T* qrow = qbase + i * D;
              for (int64_t j = 0; j < kk; ++j) {
                T* gkrow = gk + (s + j) * D;
                const T a = dArow[j];
                for (int64_t c = 0; c < D; ++c) gkrow[c] += a * qrow[c];
              }
            }
          }
        }
      });

      // pass 2: bias table, reduced over batch and position per head
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        ThreadPool::parallel_for(H, [&](int64_t h0, int64_t h1) {
          for (int64_t h = h0; h < h1; ++h) {
            T* gb = bd->grad.data() + h * (2 * k - 1);
            for (int64_t b = 0; b < B; ++b)
              for (int64_t i = 0; i < N; ++i) {
                const int64_t row = (b * H + h) * N + i;
                const int64_t s = window_start(i, k, N);
                const T* dArow = dA.data() + row * kk;
                for (int64_t j = 0; j < kk; ++j) gb[(s + j - i) + (k - 1)] += dArow[j];
              }
          }
        });
      }
    });
  }
  return out;
}

// Oracle: global attention with out-of-window logits pushed to -1e30, built
// entirely from the generic primitives so its gradients come from an
// independent code path. O(n^2) time and memory — test scale only.
template <typename T>
Tensor<T> na_reference(const Tensor<T>& q, const Tensor<T>& k_t, const Tensor<T>& v, const Tensor<T>& bias,
                       int64_t k) {
  detail::na_check_args(q, k_t, v, bias, k);
  const bool batched = q.ndim() == 4;
  const int64_t B = batched ? q.dim(0) : 1;
  const int64_t H = batched ? q.dim(1) : q.dim(0);
  const int64_t N = batched ? q.dim(2) : q.dim(1);
  const int64_t D = batched ? q.dim(3) : q.dim(2);
  const T inv_sqrt_d = T(1) / std::sqrt(T(D));

  Tensor<T> qf = reshape(q, {B * H, N, D});
  Tensor<T> kf = reshape(k_t, {B * H, N, D});
  Tensor<T> vf = reshape(v, {B * H, N, D});
  Tensor<T> scores = bmm(qf, permute(kf, {0, 2, 1}));  // [B*H, N, N]

  // expand the bias table to a [B*H, N, N] matrix by gathering from the
  // flattened table; out-of-window cells read entry 0 but are masked below
  std::vector<int64_t> idx(size_t(B * H * N * N));
  Tensor<T> mask({B * H, N, N});
  for (int64_t bh = 0; bh < B * H; ++bh) {
    const int64_t h = bh % H;
    for (int64_t i = 0; i < N; ++i) {
      const int64_t s = window_start(i, k, N);
      const int64_t kk = window_len(k, N);
      for (int64_t j = 0; j < N; ++j) {
        const bool inside = j >= s && j < s + kk;
        idx[size_t((bh * N + i) * N + j)] = inside ? h * (2 * k - 1) + (j - i) + (k - 1) : 0;
        mask.data()[(bh * N + i) * N + j] = inside ? T(0) : T(-1e30);
      }
    }
  }
  Tensor<T> bias_mat = reshape(gather(reshape(bias, {H * (2 * k - 1)}), 0, idx), {B * H, N, N});
  Tensor<T> logits = scalar_mul(add(add(scores, bias_mat), mask), inv_sqrt_d);
  Tensor<T> weights = softmax_lastdim(logits);
  Tensor<T> outf = bmm(weights, vf);
  return reshape(outf, q.shape());
}

// Value-only reference pass over raw buffers: identical arithmetic class to
// na_reference (O(n^2 d)) but one logit row at a time, so the benchmark can
// run large n without n x n tensors.
template <typename T>
void na_reference_streaming(const T* q, const T* k_t, const T* v, const T* bias, int64_t heads, int64_t n,
                            int64_t d, int64_t k, T* out) {
  const int64_t kk = window_len(k, n);
  const T inv_sqrt_d = T(1) / std::sqrt(T(d));
  std::vector<T> logits(static_cast<size_t>(n));
  for (int64_t h = 0; h < heads; ++h) {
    const T* qh = q + h * n * d;
    const T* kh = k_t + h * n * d;
    const T* vh = v + h * n * d;
    const T* bh = bias ? bias + h * (2 * k - 1) : nullptr;
    T* oh = out + h * n * d;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t s = window_start(i, k, n);
      const T* qrow = qh + i * d;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < n; ++j) {
        const T* krow = kh + j * d;
        T dot = T(0);
        for (int64_t c = 0; c < d; ++c) dot += qrow[c] * krow[c];
        const bool inside = j >= s && j < s + kk;
        T logit = dot + (inside && bh ? bh[(j - i) + (k - 1)] : T(0));
        logit = (logit + (inside ? T(0) : T(-1e30))) * inv_sqrt_d;
        logits[size_t(j)] = logit;
        mx = std::max(mx, logit);
      }
      T sum = T(0);
      for (int64_t j = 0; j < n; ++j) {
        const T e = std::exp(logits[size_t(j)] - mx);
        logits[size_t(j)] = e;
        sum += e;
      }
      const T inv_sum = T(1) / sum;
      T* orow = oh + i * d;
      for (int64_t c = 0; c < d; ++c) orow[c] = T(0);
      for (int64_t j = 0; j < n; ++j) {
        const T w = logits[size_t(j)] * inv_sum;
        if (w == T(0)) continue;
        const T* vrow = vh + j * d;
        for (int64_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// scaling benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
  int64_t n = 0;
  std::string impl;  // "na_forward" | "na_reference"
  double flops_est = 0.0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double median_ms = 0.0;
};

inline double na_forward_flops(int64_t heads, int64_t n, int64_t k, int64_t d) {
  return double(heads) * double(n) * double(window_len(k, n)) * double(4 * d + 5);
}

inline double na_reference_flops(int64_t heads, int64_t n, int64_t d) {
  return double(heads) * double(n) * double(n) * double(4 * d + 5);
}

// Times the fused kernel against the streaming reference at each length.
// Runs in float (the training precision). Thread count is whatever the pool
// is configured with; the scaling acceptance check pins it to 1.
inline std::vector<BenchRow> bench_scaling(int64_t k, const std::vector<int64_t>& lengths, int64_t d,
                                           int64_t heads, int repeats, uint64_t seed = 17) {
  check(repeats >= 1, "bench_scaling: repeats must be >= 1");
  for (size_t i = 1; i < lengths.size(); ++i)
    check(lengths[i] > lengths[i - 1], "bench_scaling: lengths must be ascending");

  using clock = std::chrono::steady_clock;
  auto stats = [](std::vector<double> ms, BenchRow& row) {
    double mean = 0;
    for (double v : ms) mean += v;
    mean /= double(ms.size());
    double var = 0;
    for (double v : ms) var += (v - mean) * (v - mean);
    var /= double(ms.size());
    std::sort(ms.begin(), ms.end());
    const size_t mid = ms.size() / 2;
    row.mean_ms = mean;
    row.std_ms = std::sqrt(var);
    row.median_ms = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  };

  std::vector<BenchRow> rows;
  Rng rng(seed);
  for (int64_t n : lengths) {
    Tensor<float> q({heads, n, d}), kt({heads, n, d}), v({heads, n, d});
    q.fill_gaussian(rng, 0.f, 1.f);
    kt.fill_gaussian(rng, 0.f, 1.f);
    v.fill_gaussian(rng, 0.f, 1.f);
    Tensor<float> bias({heads, 2 * k - 1});
    Tensor<float> ref_out({heads, n, d});

    BenchRow fwd{n, "na_forward", na_forward_flops(heads, n, k, d), 0, 0, 0};
    {
      std::vector<double> ms;
      (void)na_forward(q, kt, v, bias, k);  // warmup
      for (int r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        Tensor<float> out = na_forward(q, kt, v, bias, k);
        const auto t1 = clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      stats(std::move(ms), fwd);
    }
    rows.push_back(fwd);

    BenchRow ref{n, "na_reference", na_reference_flops(heads, n, d), 0, 0, 0};
    {
      std::vector<double> ms;
      na_reference_streaming(q.data(), kt.data(), v.data(), bias.data(), heads, n, d, k,
                             ref_out.data());  // warmup
      for (int r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        na_reference_streaming(q.data(), kt.data(), v.data(), bias.data(), heads, n, d, k, ref_out.data());
        const auto t1 = clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      stats(std::move(ms), ref);
    }
    rows.push_back(ref);
  }
  return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("bench_scaling: cannot write " + path);
  f << "# flops_est: na_forward = heads*n*k*(4*d+5); na_reference = heads*n^2*(4*d+5)\n";
  f << "n,impl,flops_est,mean_ms,std_ms\n";
  f << std::setprecision(17);
  for (const auto& r : rows) f << r.n << "," << r.impl << "," << r.flops_est << "," << r.mean_ms << "," << r.std_ms << "\n";
  if (!f.good()) throw IoError("bench_scaling: write failed for " + path);
}

}  // namespace ecgnat
