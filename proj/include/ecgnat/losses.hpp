#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgnat/ops.hpp"

// Training objectives: token masking and masked-region reconstruction error
// for self-supervised pretraining, and the supervised-contrastive /
// cross-entropy pair for fine-tuning. Everything returning a Tensor is an
// autodiff graph node.

namespace ecgnat {

// ---------------------------------------------------------------------------
// token masking
// ---------------------------------------------------------------------------

struct MaskPlan {
  std::vector<int64_t> positions;  // masked token indices, ascending, unique
  double noise_std = 0.2;
  double mask_ratio = 0.5;
};

// |positions| == round(mask_ratio * n_tokens), sampled without replacement
inline MaskPlan make_mask_plan(int64_t n_tokens, double mask_ratio, double noise_std, Rng& rng) {
  check(n_tokens >= 1, "make_mask_plan: n_tokens must be positive");
  check(mask_ratio > 0 && mask_ratio <= 1, "make_mask_plan: mask_ratio must be in (0,1]");
  check(noise_std >= 0, "make_mask_plan: noise_std must be >= 0");
  MaskPlan plan;
  plan.noise_std = noise_std;
  plan.mask_ratio = mask_ratio;
  const int64_t m = int64_t(std::llround(mask_ratio * double(n_tokens)));
  plan.positions = rng.sample_without_replacement(n_tokens, m);
  return plan;
}

namespace detail {

template <typename T>
void check_mask_args(const Tensor<T>& tokens, const std::vector<MaskPlan>& plans) {
  check_shape(tokens.ndim() == 3, "apply_mask: expected [batch x channels x tokens], got " +
                                      shape_str(tokens.shape()));
  check(int64_t(plans.size()) == tokens.dim(0),
        "apply_mask: " + std::to_string(plans.size()) + " plans for batch of " + std::to_string(tokens.dim(0)));
  for (const MaskPlan& p : plans)
    for (int64_t i : p.positions)
      check(i >= 0 && i < tokens.dim(2),
            "apply_mask: masked position " + std::to_string(i) + " out of range for " +
                std::to_string(tokens.dim(2)) + " tokens");
}

}  // namespace detail

// corrupt masked token columns by adding per-channel gaussian noise; the
// addition stays on the tape, so encoder gradients flow through masking.
// Noise is drawn in (sample, position, channel) order — two calls with
// identically seeded rngs corrupt identically.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& tokens, const std::vector<MaskPlan>& plans, Rng& rng) {
  detail::check_mask_args(tokens, plans);
  const int64_t C = tokens.dim(1), n = tokens.dim(2);
  Tensor<T> noise(tokens.shape());
  for (size_t b = 0; b < plans.size(); ++b)
    for (int64_t i : plans[b].positions)
      for (int64_t c = 0; c < C; ++c)
        noise.data()[size_t((int64_t(b) * C + c) * n + i)] = T(rng.gaussian(0.0, plans[b].noise_std));
  return add(tokens, noise);
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& tokens, const MaskPlan& plan, Rng& rng) {
  check_shape(tokens.ndim() == 2, "apply_mask: expected [channels x tokens], got " + shape_str(tokens.shape()));
  Tensor<T> t3 = reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
  Tensor<T> out = apply_mask(t3, std::vector<MaskPlan>{plan}, rng);
  return reshape(out, tokens.shape());
}

// ablation corruption: masked columns become zero (multiplicative keep-mask,
// so the graph stays connected through unmasked columns)
template <typename T>
Tensor<T> zero_mask_variant(const Tensor<T>& tokens, const std::vector<MaskPlan>& plans) {
  detail::check_mask_args(tokens, plans);
  const int64_t C = tokens.dim(1), n = tokens.dim(2);
  Tensor<T> keep(tokens.shape(), T(1));
  for (size_t b = 0; b < plans.size(); ++b)
    for (int64_t i : plans[b].positions)
      for (int64_t c = 0; c < C; ++c) keep.data()[size_t((int64_t(b) * C + c) * n + i)] = T(0);
  return mul(tokens, keep);
}

template <typename T>
Tensor<T> zero_mask_variant(const Tensor<T>& tokens, const MaskPlan& plan) {
  check_shape(tokens.ndim() == 2,
              "zero_mask_variant: expected [channels x tokens], got " + shape_str(tokens.shape()));
  Tensor<T> t3 = reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
  Tensor<T> out = zero_mask_variant(t3, std::vector<MaskPlan>{plan});
  return reshape(out, tokens.shape());
}

// ---------------------------------------------------------------------------
// masked reconstruction error
// ---------------------------------------------------------------------------

// mean squared error over the input-sample spans behind the masked tokens.
// Token i covers input columns [4i, 4i+4) — the tokenizer's total stride —
// clipped to the signal length. Mean (not sum) over the included scalars so
// the magnitude is comparable across mask ratios.
template <typename T>
Tensor<T> recon_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const std::vector<MaskPlan>& plans) {
  check_shape(x.shape() == x_hat.shape(),
              "recon_loss: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  check_shape(x.ndim() == 3, "recon_loss: expected [batch x leads x samples], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  check(int64_t(plans.size()) == B, "recon_loss: plan count != batch size");

  Tensor<T> total = Tensor<T>::scalar(T(0));
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<int64_t> cols;
    for (int64_t i : plans[size_t(b)].positions) {
      check(4 * i < D, "recon_loss: masked token " + std::to_string(i) + " maps past the signal end");
      for (int64_t c = 4 * i; c < std::min(4 * i + 4, D); ++c) cols.push_back(c);
    }
    if (cols.empty()) continue;
    count += L * int64_t(cols.size());
    Tensor<T> xh = gather(narrow(x_hat, 0, b, 1), 2, cols);  // [1, L, |cols|]
    // reference values are leaves — no gradient flows into x
    Tensor<T> ref({1, L, int64_t(cols.size())});
    for (int64_t l = 0; l < L; ++l)
      for (size_t j = 0; j < cols.size(); ++j)
        ref.data()[size_t(l * int64_t(cols.size())) + j] = x.data()[size_t((b * L + l) * D + cols[j])];
    Tensor<T> d = sub(xh, ref);
    total = add(total, reduce_sum_all(mul(d, d)));
  }
  if (count == 0) return Tensor<T>::scalar(T(0));
  return scalar_mul(total, T(1) / T(count));
}

template <typename T>
Tensor<T> recon_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const MaskPlan& plan) {
  check_shape(x.ndim() == 2 && x_hat.ndim() == 2,
              "recon_loss: expected [leads x samples], got " + shape_str(x.shape()));
  check_shape(x.shape() == x_hat.shape(),
              "recon_loss: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  return recon_loss(reshape(x, {1, x.dim(0), x.dim(1)}), reshape(x_hat, {1, x_hat.dim(0), x_hat.dim(1)}),
                    std::vector<MaskPlan>{plan});
}

// ---------------------------------------------------------------------------
// contrastive + cross-entropy fine-tuning objectives
// ---------------------------------------------------------------------------

// plain (non-graph) cosine similarity with a zero-norm guard
template <typename T>
T cosine_sim(const Tensor<T>& z1, const Tensor<T>& z2) {
  check_shape(z1.ndim() == 1 && z2.ndim() == 1 && z1.numel() == z2.numel(),
              "cosine_sim: expects two equal-length vectors");
  T dot = 0, n1 = 0, n2 = 0;
  for (int64_t i = 0; i < z1.numel(); ++i) {
    dot += z1.data()[size_t(i)] * z2.data()[size_t(i)];
    n1 += z1.data()[size_t(i)] * z1.data()[size_t(i)];
    n2 += z2.data()[size_t(i)] * z2.data()[size_t(i)];
  }
  const T floor = T(1e-12);
  return dot / (std::max(std::sqrt(n1), floor) * std::max(std::sqrt(n2), floor));
}

// supervised contrastive loss over pooled embeddings Z [B x E].
// For each anchor i with positives P(i) (same-label others) and candidates
// A(i) (everyone else):
//   -(1/|P(i)|) sum_{p in P(i)} log( exp(cos(z_i,z_p)/tau) /
//                                    sum_{a in A(i)} exp(cos(z_i,z_a)/tau) )
// averaged over anchors with |P(i)| > 0. Anchors without positives are
// excluded from the average; if no anchor has a positive the loss is 0 and
// *no_positive_anchors is set.
template <typename T>
Tensor<T> supcon_loss(const Tensor<T>& z, const std::vector<int64_t>& labels, T tau,
                      bool* no_positive_anchors = nullptr) {
  check_shape(z.ndim() == 2, "supcon_loss: expected [batch x embed], got " + shape_str(z.shape()));
  const int64_t B = z.dim(0);
  check(int64_t(labels.size()) == B, "supcon_loss: label count != batch size");
  check(B >= 2, "supcon_loss: needs a batch of at least 2");
  check(tau > 0, "supcon_loss: tau must be positive");
  if (no_positive_anchors) *no_positive_anchors = false;

  int64_t n_anchors = 0;
  std::vector<int64_t> n_pos(size_t(B), 0);
  for (int64_t i = 0; i < B; ++i) {
    for (int64_t p = 0; p < B; ++p)
      if (p != i && labels[size_t(p)] == labels[size_t(i)]) ++n_pos[size_t(i)];
    if (n_pos[size_t(i)] > 0) ++n_anchors;
  }
  if (n_anchors == 0) {
    if (no_positive_anchors) *no_positive_anchors = true;
    return Tensor<T>::scalar(T(0));
  }

  Tensor<T> zn = l2_normalize_rows(z);
  Tensor<T> sims = scalar_mul(matmul(zn, permute(zn, {1, 0})), T(1) / tau);  // [B,B]

  // per-row shift by the off-diagonal max (a constant: softmax ratios are
  // shift-invariant) keeps every denominator in [1, B)
  Tensor<T> shift({B});
  for (int64_t i = 0; i < B; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < B; ++j)
      if (j != i) m = std::max(m, sims.data()[size_t(i * B + j)]);
    shift.data()[size_t(i)] = m;
  }
  Tensor<T> shifted = sub_colvec(sims, shift);
  // the anchor itself is not a candidate: push the diagonal to -1e30 so its
  // exp underflows to exactly zero
  Tensor<T> diag_mask({B, B});
  for (int64_t i = 0; i < B; ++i) diag_mask.data()[size_t(i * B + i)] = T(-1e30);
  Tensor<T> den = reduce_sum_lastdim(exp_op(add(shifted, diag_mask)));  // [B]
  Tensor<T> log_den = log_op(den);

  // pair weights: W[i][p] = 1 / (|P(i)| * n_anchors) for positives, else 0
  Tensor<T> w({B, B});
  Tensor<T> row_w({B});
  for (int64_t i = 0; i < B; ++i) {
    if (n_pos[size_t(i)] == 0) continue;
    row_w.data()[size_t(i)] = T(1) / T(n_anchors);
    for (int64_t p = 0; p < B; ++p)
      if (p != i && labels[size_t(p)] == labels[size_t(i)])
        w.data()[size_t(i * B + p)] = T(1) / (T(n_pos[size_t(i)]) * T(n_anchors));
  }
  Tensor<T> numer = reduce_sum_all(mul(shifted, w));
  Tensor<T> denom = reduce_sum_all(mul(log_den, row_w));
  return sub(denom, numer);
}

// mean cross-entropy of logits [B x C] against integer labels, via the
// shifted log-sum-exp
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
  check_shape(logits.ndim() == 2, "ce_loss: expected [batch x classes], got " + shape_str(logits.shape()));
  const int64_t B = logits.dim(0), C = logits.dim(1);
  check(int64_t(labels.size()) == B, "ce_loss: label count != batch size");
  std::vector<int64_t> picked_idx(static_cast<size_t>(B));
  for (int64_t i = 0; i < B; ++i) {
    const int64_t y = labels[size_t(i)];
    check(y >= 0 && y < C, "ce_loss: label " + std::to_string(y) + " out of range for " + std::to_string(C) +
                               " classes");
    picked_idx[size_t(i)] = i * C + y;
  }
  Tensor<T> shift({B});
  for (int64_t i = 0; i < B; ++i) {
    T m = logits.data()[size_t(i * C)];
    for (int64_t j = 1; j < C; ++j) m = std::max(m, logits.data()[size_t(i * C + j)]);
    shift.data()[size_t(i)] = m;
  }
  Tensor<T> lse = add(log_op(reduce_sum_lastdim(exp_op(sub_colvec(logits, shift)))), shift);  // [B]
  Tensor<T> picked = gather(reshape(logits, {B * C}), 0, picked_idx);                         // [B]
  return reduce_mean_all(sub(lse, picked));
}

// alpha * supcon + (1 - alpha) * ce; the endpoints return the single
// component tensor itself, so the identities are exact
template <typename T>
Tensor<T> total_loss(const Tensor<T>& z, const std::vector<int64_t>& labels, const Tensor<T>& logits,
                     T alpha, T tau, bool* no_positive_anchors = nullptr) {
  check(alpha >= 0 && alpha <= 1, "total_loss: alpha must be in [0,1]");
  if (alpha == T(0)) {
    if (no_positive_anchors) *no_positive_anchors = false;
    return ce_loss(logits, labels);
  }
  if (alpha == T(1)) return supcon_loss(z, labels, tau, no_positive_anchors);
  Tensor<T> sup = supcon_loss(z, labels, tau, no_positive_anchors);
  Tensor<T> ce = ce_loss(logits, labels);
  return add(scalar_mul(sup, alpha), scalar_mul(ce, T(1) - alpha));
}

}  // namespace ecgnat
