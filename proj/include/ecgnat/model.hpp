#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "ecgnat/natten.hpp"
#include "ecgnat/ops.hpp"

// The ECG-NAT network: a conv tokenizer (stride 4 total), four encoder
// stages of pre-norm neighborhood-attention blocks joined by strided-conv
// downsamplers, a transposed-conv decoder mirroring the encoder's shape
// ladder back to the input, and a linear classification head over the
// flattened final-stage features.

namespace ecgnat {

struct ModelConfig {
  int64_t n_leads = 12;
  int64_t input_len = 2500;
  int64_t embed_dim = 96;
  std::array<int64_t, 4> stage_heads{2, 4, 8, 16};
  double mlp_ratio = 4.0;
  int64_t window_k = 7;
  int64_t blocks_per_stage = 3;
  int64_t n_classes = 3;
  // training-time knobs carried with the model so checkpoints are
  // self-describing
  double noise_std = 0.2;
  double mask_ratio = 0.5;
  double tau = 0.07;
  double alpha = 0.5;

  int64_t stage_width(int64_t s) const { return embed_dim << s; }

  // length after the two stride-2 tokenizer convs
  int64_t token_len() const {
    return conv1d_out_len(conv1d_out_len(input_len, 3, 2, 1), 3, 2, 1);
  }

  // length entering stage s (0-based); downsampling halves with floor
  int64_t stage_len(int64_t s) const {
    int64_t n = token_len();
    for (int64_t i = 0; i < s; ++i) n /= 2;
    return n;
  }

  int64_t mlp_hidden(int64_t s) const { return int64_t(mlp_ratio * double(stage_width(s))); }

  // appends every violated constraint, so callers can report them all at once
  void collect_errors(std::vector<std::string>& errs) const {
    if (n_leads < 1) errs.push_back("n_leads must be positive");
    if (input_len < 1) errs.push_back("input_len must be positive");
    if (embed_dim < 2 || embed_dim % 2 != 0)
      errs.push_back("embed_dim must be even and >= 2 (tokenizer mid-width is embed_dim/2)");
    for (size_t s = 0; s < stage_heads.size(); ++s) {
      if (stage_heads[s] < 1)
        errs.push_back("stage_heads must be positive");
      else if (embed_dim >= 2 && embed_dim % 2 == 0 && stage_width(int64_t(s)) % stage_heads[s] != 0)
        errs.push_back("stage " + std::to_string(s) + " width " + std::to_string(stage_width(int64_t(s))) +
                       " not divisible by " + std::to_string(stage_heads[s]) + " heads");
    }
    if (window_k < 1 || window_k % 2 == 0) errs.push_back("window_k must be odd and >= 1");
    if (blocks_per_stage < 1) errs.push_back("blocks_per_stage must be >= 1");
    if (n_classes < 2) errs.push_back("n_classes must be >= 2");
    if (mlp_ratio <= 0)
      errs.push_back("mlp_ratio must be positive");
    else if (mlp_hidden(0) < 1)
      errs.push_back("mlp_ratio * embed_dim must be >= 1");
    if (noise_std < 0) errs.push_back("noise_std must be >= 0");
    if (!(mask_ratio > 0 && mask_ratio <= 1)) errs.push_back("mask_ratio must be in (0,1]");
    if (tau <= 0) errs.push_back("tau must be positive");
    if (alpha < 0 || alpha > 1) errs.push_back("alpha must be in [0,1]");
    if (input_len >= 1 && stage_len(3) < 1)
      errs.push_back("input_len " + std::to_string(input_len) + " too short — final stage length would be " +
                     std::to_string(stage_len(3)));
  }

  void validate() const {
    std::vector<std::string> errs;
    collect_errors(errs);
    if (!errs.empty()) throw ConfigError("config: " + errs.front());
  }
};

// closed-form learnable-scalar count for a config; must agree with the
// built model's registry total
inline int64_t count_params(const ModelConfig& cfg) {
  const int64_t mid = cfg.embed_dim / 2;
  int64_t total = 0;
  total += mid * cfg.n_leads * 3 + mid;                 // tokenizer conv 1
  total += cfg.embed_dim * mid * 3 + cfg.embed_dim;     // tokenizer conv 2
  for (int64_t s = 0; s < 4; ++s) {
    const int64_t c = cfg.stage_width(s);
    const int64_t hidden = int64_t(cfg.mlp_ratio * double(c));
    int64_t block = 0;
    block += 2 * c;                                     // ln1
    block += 4 * (c * c + c);                           // q,k,v,proj linear
    block += cfg.stage_heads[size_t(s)] * (2 * cfg.window_k - 1);  // relative bias
    block += 2 * c;                                     // ln2
    block += c * hidden + hidden + hidden * c + c;      // mlp
    total += block * cfg.blocks_per_stage;
    if (s < 3) total += (2 * c) * c * 3 + 2 * c;        // downsampler conv
  }
  // decoder rungs mirror the recorded ladder; kernel is 2 or 3 but the
  // parameter count depends on it, so recompute the ladder here
  {
    std::vector<std::pair<int64_t, int64_t>> ladder;  // (channels, length) encoder-side
    ladder.emplace_back(cfg.n_leads, cfg.input_len);
    ladder.emplace_back(mid, conv1d_out_len(cfg.input_len, 3, 2, 1));
    for (int64_t s = 0; s < 4; ++s) ladder.emplace_back(cfg.stage_width(s), cfg.stage_len(s));
    for (size_t r = ladder.size() - 1; r > 0; --r) {
      const auto [ci, a] = ladder[r];
      const auto [co, b] = ladder[r - 1];
      const int64_t k = b - 2 * a + 2;
      total += ci * co * k + co;
    }
  }
  total += cfg.n_classes * (cfg.stage_width(3) * cfg.stage_len(3)) + cfg.n_classes;  // classifier
  return total;
}

// per-stage block outputs captured during encode, for locality probes
template <typename T>
struct EncodeTrace {
  std::vector<Tensor<T>> stage_outputs;  // [B, n_s, C_s] after each stage's blocks
};

template <typename T>
class EcgNat {
 public:
  explicit EcgNat(ModelConfig cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0xec6'0001));
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // fixed-order registry backing optimizer iteration and checkpoints
  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }

  Tensor<T> param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw ContractError("model: no parameter named " + name);
  }

  int64_t count_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  void set_requires_grad(bool rg) {
    for (auto& [n, t] : params_) t.set_requires_grad(rg);
  }

  void zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  // [B, L, D] or [L, D] -> [B, embed_dim, D/4]
  Tensor<T> tokenize(const Tensor<T>& x) const {
    Tensor<T> in = x.ndim() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
    check_shape(in.ndim() == 3 && in.dim(1) == cfg_.n_leads && in.dim(2) == cfg_.input_len,
                "tokenize: expected [batch x " + std::to_string(cfg_.n_leads) + " x " +
                    std::to_string(cfg_.input_len) + "], got " + shape_str(x.shape()));
    Tensor<T> h = relu(conv1d(in, tok1_w_, tok1_b_, 2, 1));
    return conv1d(h, tok2_w_, tok2_b_, 2, 1);
  }

  // [B, C, n] per stage s
  Tensor<T> downsample(const Tensor<T>& u, int64_t s) const {
    check(s >= 0 && s < 3, "downsample: stage out of range");
    const int64_t n = u.dim(2);
    check_shape(n >= 2, "downsample: length must be >= 2, got " + std::to_string(n));
    Tensor<T> y = relu(conv1d(u, down_w_[size_t(s)], down_b_[size_t(s)], 2, 1));
    // conv with pad 1 yields ceil(n/2); drop the trailing column on odd
    // lengths so the ladder halves with floor (625 -> 312)
    if (n % 2 != 0) y = narrow(y, 2, 0, n / 2);
    return y;
  }

  // pre-norm residual block on [B, n, C]
  Tensor<T> nat_block(const Tensor<T>& u, int64_t stage, int64_t block) const {
    const Blk& blk = blocks_[size_t(stage * cfg_.blocks_per_stage + block)];
    const int64_t B = u.dim(0), n = u.dim(1), C = u.dim(2);
    const int64_t heads = cfg_.stage_heads[size_t(stage)];
    const int64_t dh = C / heads;

    Tensor<T> h = layer_norm(u, blk.ln1_g, blk.ln1_b);
    Tensor<T> h2 = reshape(h, {B * n, C});
    auto split_heads = [&](const Tensor<T>& t) {
      return permute(reshape(t, {B, n, heads, dh}), {0, 2, 1, 3});  // [B, heads, n, dh]
    };
    Tensor<T> q = split_heads(linear(h2, blk.q_w, blk.q_b));
    Tensor<T> k = split_heads(linear(h2, blk.k_w, blk.k_b));
    Tensor<T> v = split_heads(linear(h2, blk.v_w, blk.v_b));
    Tensor<T> att = na_forward(q, k, v, blk.bias_table, cfg_.window_k);
    Tensor<T> merged = reshape(permute(att, {0, 2, 1, 3}), {B * n, C});
    Tensor<T> u1 = add(u, reshape(linear(merged, blk.proj_w, blk.proj_b), {B, n, C}));

    Tensor<T> m = layer_norm(u1, blk.ln2_g, blk.ln2_b);
    Tensor<T> m2 = reshape(m, {B * n, C});
    Tensor<T> mlp = linear(gelu(linear(m2, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b);
    return add(u1, reshape(mlp, {B, n, C}));
  }

  // tokens [B, C, n] -> latent [B, C_final, n_final]
  Tensor<T> encode_tokens(const Tensor<T>& tok, EncodeTrace<T>* trace = nullptr) const {
    Tensor<T> u = tok;
    for (int64_t s = 0; s < 4; ++s) {
      Tensor<T> seq = permute(u, {0, 2, 1});  // [B, n, C]
      for (int64_t b = 0; b < cfg_.blocks_per_stage; ++b) seq = nat_block(seq, s, b);
      if (trace) trace->stage_outputs.push_back(seq);
      u = permute(seq, {0, 2, 1});            // [B, C, n]
      if (s < 3) u = downsample(u, s);
    }
    return u;
  }

  Tensor<T> encode(const Tensor<T>& x, EncodeTrace<T>* trace = nullptr) const {
    return encode_tokens(tokenize(x), trace);
  }

  // latent [B, C_final, n_final] -> [B, L, D]
  Tensor<T> decode(const Tensor<T>& z) const {
    check_shape(z.ndim() == 3 && z.dim(1) == cfg_.stage_width(3) && z.dim(2) == cfg_.stage_len(3),
                "decode: expected [batch x " + std::to_string(cfg_.stage_width(3)) + " x " +
                    std::to_string(cfg_.stage_len(3)) + "], got " + shape_str(z.shape()));
    Tensor<T> u = z;
    for (size_t r = 0; r < dec_w_.size(); ++r) {
      u = conv_transpose1d(u, dec_w_[r], dec_b_[r], 2, 0);
      if (r + 1 < dec_w_.size()) u = relu(u);  // final layer stays linear
    }
    return u;
  }

  // latent -> [B, n_classes]
  Tensor<T> classify(const Tensor<T>& z) const {
    const int64_t B = z.dim(0);
    return linear(reshape(z, {B, z.dim(1) * z.dim(2)}), cls_w_, cls_b_);
  }

  // latent -> [B, C_final]: mean over the length axis, the per-sample
  // embedding the contrastive loss compares
  Tensor<T> embed(const Tensor<T>& z) const { return reduce_mean_lastdim(z); }

 private:
  struct Blk {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b;
    Tensor<T> bias_table;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
  };

  void build(Rng& rng) {
    auto reg = [&](const std::string& name, Tensor<T> t) {
      params_.emplace_back(name, t);
      return t;
    };
    auto make_linear_w = [&](const std::string& name, int64_t in, int64_t out) {
      Tensor<T> w({in, out});
      w.fill_trunc_gaussian(rng, T(0.02));
      return reg(name, w);
    };
    auto make_conv_w = [&](const std::string& name, Shape shape, int64_t fan_in) {
      Tensor<T> w(std::move(shape));
      const T bound = T(1) / std::sqrt(T(fan_in));
      w.fill_uniform(rng, -bound, bound);
      return reg(name, w);
    };
    auto make_zeros = [&](const std::string& name, Shape shape) { return reg(name, Tensor<T>(std::move(shape))); };
    auto make_ones = [&](const std::string& name, Shape shape) {
      return reg(name, Tensor<T>(std::move(shape), T(1)));
    };

    const int64_t mid = cfg_.embed_dim / 2;
    tok1_w_ = make_conv_w("tokenizer.conv1.weight", {mid, cfg_.n_leads, 3}, cfg_.n_leads * 3);
    tok1_b_ = make_zeros("tokenizer.conv1.bias", {mid});
    tok2_w_ = make_conv_w("tokenizer.conv2.weight", {cfg_.embed_dim, mid, 3}, mid * 3);
    tok2_b_ = make_zeros("tokenizer.conv2.bias", {cfg_.embed_dim});

    for (int64_t s = 0; s < 4; ++s) {
      const int64_t c = cfg_.stage_width(s);
      const int64_t hidden = cfg_.mlp_hidden(s);
      const int64_t heads = cfg_.stage_heads[size_t(s)];
      for (int64_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
        Blk blk;
        blk.ln1_g = make_ones(p + "ln1.gamma", {c});
        blk.ln1_b = make_zeros(p + "ln1.beta", {c});
        blk.q_w = make_linear_w(p + "attn.q.weight", c, c);
        blk.q_b = make_zeros(p + "attn.q.bias", {c});
        blk.k_w = make_linear_w(p + "attn.k.weight", c, c);
        blk.k_b = make_zeros(p + "attn.k.bias", {c});
        blk.v_w = make_linear_w(p + "attn.v.weight", c, c);
        blk.v_b = make_zeros(p + "attn.v.bias", {c});
        blk.proj_w = make_linear_w(p + "attn.proj.weight", c, c);
        blk.proj_b = make_zeros(p + "attn.proj.bias", {c});
        blk.bias_table = make_zeros(p + "attn.rel_bias", {heads, 2 * cfg_.window_k - 1});
        blk.ln2_g = make_ones(p + "ln2.gamma", {c});
        blk.ln2_b = make_zeros(p + "ln2.beta", {c});
        blk.fc1_w = make_linear_w(p + "mlp.fc1.weight", c, hidden);
        blk.fc1_b = make_zeros(p + "mlp.fc1.bias", {hidden});
        blk.fc2_w = make_linear_w(p + "mlp.fc2.weight", hidden, c);
        blk.fc2_b = make_zeros(p + "mlp.fc2.bias", {c});
        blocks_.push_back(blk);
      }
      if (s < 3) {
        const std::string p = "down" + std::to_string(s) + ".";
        down_w_.push_back(make_conv_w(p + "weight", {2 * c, c, 3}, c * 3));
        down_b_.push_back(make_zeros(p + "bias", {2 * c}));
      }
    }

    // decoder: walk the recorded encoder ladder backwards; per rung the
    // kernel is target_len - 2*source_len + 2 (2 for even targets, 3 when
    // the encoder floored an odd length)
    std::vector<std::pair<int64_t, int64_t>> ladder;
    ladder.emplace_back(cfg_.n_leads, cfg_.input_len);
    ladder.emplace_back(mid, conv1d_out_len(cfg_.input_len, 3, 2, 1));
    for (int64_t s = 0; s < 4; ++s) ladder.emplace_back(cfg_.stage_width(s), cfg_.stage_len(s));
    int64_t rung = 0;
    for (size_t r = ladder.size() - 1; r > 0; --r, ++rung) {
      const auto [ci, a] = ladder[r];
      const auto [co, b] = ladder[r - 1];
      const int64_t k = b - 2 * a + 2;
      // 2 for exact-doubling rungs, 3 where the downsampler floored an odd
      // length, 1 where the tokenizer's padded conv ceiled one
      check(k >= 1 && k <= 3, "decoder ladder: unexpected rung kernel " + std::to_string(k));
      const std::string p = "decoder.deconv" + std::to_string(rung) + ".";
      dec_w_.push_back(make_conv_w(p + "weight", {ci, co, k}, ci * k));
      dec_b_.push_back(make_zeros(p + "bias", {co}));
    }

    const int64_t flat = cfg_.stage_width(3) * cfg_.stage_len(3);
    cls_w_ = make_linear_w("classifier.weight", flat, cfg_.n_classes);
    cls_b_ = make_zeros("classifier.bias", {cfg_.n_classes});
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Tensor<T> tok1_w_, tok1_b_, tok2_w_, tok2_b_;
  std::vector<Blk> blocks_;
  std::vector<Tensor<T>> down_w_, down_b_;
  std::vector<Tensor<T>> dec_w_, dec_b_;
  Tensor<T> cls_w_, cls_b_;
};

}  // namespace ecgnat
