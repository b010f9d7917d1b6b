#include "ecgnat/verify.hpp"

#include <cmath>
#include <sstream>

#include "ecgnat/gradcheck.hpp"
#include "ecgnat/losses.hpp"
#include "ecgnat/model.hpp"
#include "ecgnat/natten.hpp"

namespace ecgnat {

namespace {

Tensor<double> gaussian_tensor(const Shape& shape, Rng& rng, double std = 1.0) {
  Tensor<double> t(shape);
  t.fill_gaussian(rng, 0.0, std);
  return t;
}

Tensor<double> positive_tensor(const Shape& shape, Rng& rng, double lo = 0.5, double hi = 2.0) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// gaussian draws pushed away from zero so kinked activations (relu) never
// see a probe step across their corner
Tensor<double> off_kink_tensor(const Shape& shape, Rng& rng) {
  Tensor<double> t = gaussian_tensor(shape, rng);
  for (int64_t i = 0; i < t.numel(); ++i)
    if (std::abs(t.data()[i]) < 0.05) t.data()[i] = t.data()[i] < 0 ? -0.3 : 0.3;
  return t;
}

// scalar probe that weights every output element differently, so adjoints
// that scatter to the wrong place cannot cancel out of a plain sum
struct Probe {
  Tensor<double> w;
  explicit Probe(const Shape& shape, Rng& rng) : w(gaussian_tensor(shape, rng)) {}
  Tensor<double> operator()(const Tensor<double>& y) const { return reduce_sum_all(mul(y, w)); }
};

ModelConfig mini_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.stage_heads = {1, 2, 4, 8};
  cfg.input_len = 64;
  cfg.blocks_per_stage = 1;
  cfg.n_classes = 3;
  return cfg;
}

void record(SuiteResult& r, bool ok, const std::string& what) {
  if (ok) {
    ++r.passed;
  } else {
    ++r.failed;
    r.failures.push_back(what);
  }
}

void record_grad(SuiteResult& r, const std::string& op, const GradCheckResult& res) {
  std::ostringstream msg;
  msg << op << ": " << res.worst;
  record(r, bool(res), msg.str());
}

// the double-precision analytic-vs-central check used by both the gradient
// suite and the mutation probe: q, k, v, bias through the fused kernel
GradCheckResult na_grad_case(uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6e61ull));
  const int64_t H = 2, N = 9, D = 4, k = 5;
  std::vector<Tensor<double>> inputs{
      gaussian_tensor({H, N, D}, rng), gaussian_tensor({H, N, D}, rng),
      gaussian_tensor({H, N, D}, rng), gaussian_tensor({H, 2 * k - 1}, rng, 0.5)};
  Probe probe({H, N, D}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return probe(na_forward(in[0], in[1], in[2], in[3], k));
  };
  return grad_check(inputs, fn);
}

}  // namespace

// ---------------------------------------------------------------------------

SuiteResult verify_kernel_oracle(int n_cases, uint64_t seed) {
  SuiteResult r{"kernel-oracle"};
  Rng rng(mix_seed(seed, 0x6f7263ull));
  const int64_t kernel_sizes[] = {1, 3, 5, 7};

  for (int c = 0; c < n_cases; ++c) {
    const int64_t k = kernel_sizes[rng.next_below(4)];
    const int64_t n = 1 + int64_t(rng.next_below(64));
    const int64_t d = 1 + int64_t(rng.next_below(16));
    const int64_t heads = 1 + int64_t(rng.next_below(4));
    const bool batched = rng.next_below(2) == 1;
    const int64_t batch = batched ? 1 + int64_t(rng.next_below(3)) : 0;

    const Shape shape = batched ? Shape{batch, heads, n, d} : Shape{heads, n, d};
    const Tensor<double> q = gaussian_tensor(shape, rng);
    const Tensor<double> kt = gaussian_tensor(shape, rng);
    const Tensor<double> v = gaussian_tensor(shape, rng);
    const Tensor<double> bias = gaussian_tensor({heads, 2 * k - 1}, rng, 0.5);

    const Tensor<double> fused = na_forward(q, kt, v, bias, k);
    const Tensor<double> ref = na_reference(q, kt, v, bias, k);
    double max_diff = 0;
    for (int64_t i = 0; i < fused.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(fused.data()[i] - ref.data()[i]));

    std::ostringstream what;
    what << "case " << c << " (n=" << n << " k=" << k << " d=" << d << " heads=" << heads
         << (batched ? " batched" : "") << "): max abs diff " << max_diff;
    record(r, max_diff < 1e-12, what.str());
  }
  return r;
}

// ---------------------------------------------------------------------------

SuiteResult verify_gradients(uint64_t seed, bool full) {
  SuiteResult r{"gradients"};
  Rng rng(mix_seed(seed, 0x67726164ull));

  auto check1 = [&](const char* op, std::vector<Tensor<double>> inputs,
                    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn) {
    record_grad(r, op, grad_check(std::move(inputs), fn));
  };

  // elementwise, two operands
  {
    Probe p({3, 5}, rng);
    check1("add", {gaussian_tensor({3, 5}, rng), gaussian_tensor({3, 5}, rng)},
           [=](auto& in) { return p(add(in[0], in[1])); });
    check1("sub", {gaussian_tensor({3, 5}, rng), gaussian_tensor({3, 5}, rng)},
           [=](auto& in) { return p(sub(in[0], in[1])); });
    check1("mul", {gaussian_tensor({3, 5}, rng), gaussian_tensor({3, 5}, rng)},
           [=](auto& in) { return p(mul(in[0], in[1])); });
    check1("div", {gaussian_tensor({3, 5}, rng), positive_tensor({3, 5}, rng)},
           [=](auto& in) { return p(div(in[0], in[1])); });
  }

  // elementwise, one operand
  {
    Probe p({4, 6}, rng);
    check1("scalar_mul", {gaussian_tensor({4, 6}, rng)},
           [=](auto& in) { return p(scalar_mul(in[0], 1.7)); });
    check1("scalar_add", {gaussian_tensor({4, 6}, rng)},
           [=](auto& in) { return p(scalar_add(in[0], -0.4)); });
    check1("relu", {off_kink_tensor({4, 6}, rng)}, [=](auto& in) { return p(relu(in[0])); });
    check1("gelu", {gaussian_tensor({4, 6}, rng)}, [=](auto& in) { return p(gelu(in[0])); });
    check1("log", {positive_tensor({4, 6}, rng)}, [=](auto& in) { return p(log_op(in[0])); });
    check1("exp", {gaussian_tensor({4, 6}, rng)}, [=](auto& in) { return p(exp_op(in[0])); });
    check1("sqrt", {positive_tensor({4, 6}, rng)}, [=](auto& in) { return p(sqrt_op(in[0])); });
  }

  // linear algebra
  {
    Probe p({3, 7}, rng);
    check1("matmul", {gaussian_tensor({3, 4}, rng), gaussian_tensor({4, 7}, rng)},
           [=](auto& in) { return p(matmul(in[0], in[1])); });
  }
  {
    Probe p({2, 3, 5}, rng);
    check1("bmm", {gaussian_tensor({2, 3, 4}, rng), gaussian_tensor({2, 4, 5}, rng)},
           [=](auto& in) { return p(bmm(in[0], in[1])); });
  }
  {
    Probe p({4, 3}, rng);
    check1("linear", {gaussian_tensor({4, 5}, rng), gaussian_tensor({5, 3}, rng), gaussian_tensor({3}, rng)},
           [=](auto& in) { return p(linear(in[0], in[1], in[2])); });
  }
  {
    Probe p({4, 5}, rng);
    check1("add_rowvec", {gaussian_tensor({4, 5}, rng), gaussian_tensor({5}, rng)},
           [=](auto& in) { return p(add_rowvec(in[0], in[1])); });
    check1("sub_colvec", {gaussian_tensor({4, 5}, rng), gaussian_tensor({4}, rng)},
           [=](auto& in) { return p(sub_colvec(in[0], in[1])); });
  }

  // shape movement
  {
    Probe p({6, 2, 2}, rng);
    check1("reshape", {gaussian_tensor({3, 8}, rng)},
           [=](auto& in) { return p(reshape(in[0], {6, 2, 2})); });
  }
  {
    Probe p({5, 2, 3}, rng);
    check1("permute", {gaussian_tensor({2, 3, 5}, rng)},
           [=](auto& in) { return p(permute(in[0], {2, 0, 1})); });
  }
  {
    Probe p({3, 7}, rng);
    check1("concat", {gaussian_tensor({3, 4}, rng), gaussian_tensor({3, 3}, rng)},
           [=](auto& in) { return p(concat(std::vector<Tensor<double>>{in[0], in[1]}, 1)); });
  }
  {
    const std::vector<int64_t> idx{4, 0, 2, 2, 1};
    Probe p({5, 3}, rng);
    check1("gather", {gaussian_tensor({6, 3}, rng)},
           [=](auto& in) { return p(gather(in[0], 0, idx)); });
  }
  {
    Probe p({3, 4}, rng);
    check1("narrow", {gaussian_tensor({3, 9}, rng)},
           [=](auto& in) { return p(narrow(in[0], 1, 2, 4)); });
  }

  // reductions
  {
    Probe p({3}, rng);
    check1("reduce_sum_lastdim", {gaussian_tensor({3, 6}, rng)},
           [=](auto& in) { return p(reduce_sum_lastdim(in[0])); });
    check1("reduce_mean_lastdim", {gaussian_tensor({3, 6}, rng)},
           [=](auto& in) { return p(reduce_mean_lastdim(in[0])); });
  }
  check1("reduce_sum_all", {gaussian_tensor({3, 6}, rng)},
         [](auto& in) { return reduce_sum_all(in[0]); });
  check1("reduce_mean_all", {gaussian_tensor({3, 6}, rng)},
         [](auto& in) { return reduce_mean_all(in[0]); });

  // normalization and attention-adjacent ops
  {
    Probe p({4, 6}, rng);
    check1("l2_normalize_rows", {gaussian_tensor({4, 6}, rng)},
           [=](auto& in) { return p(l2_normalize_rows(in[0])); });
    check1("softmax_lastdim", {gaussian_tensor({4, 6}, rng)},
           [=](auto& in) { return p(softmax_lastdim(in[0])); });
  }
  {
    Probe p({2, 5, 6}, rng);
    check1("layer_norm",
           {gaussian_tensor({2, 5, 6}, rng), positive_tensor({6}, rng), gaussian_tensor({6}, rng)},
           [=](auto& in) { return p(layer_norm(in[0], in[1], in[2])); });
  }

  // convolutions
  {
    Probe p({1, 4, 5}, rng);
    check1("conv1d",
           {gaussian_tensor({1, 3, 10}, rng), gaussian_tensor({4, 3, 3}, rng), gaussian_tensor({4}, rng)},
           [=](auto& in) { return p(conv1d(in[0], in[1], in[2], 2, 1)); });
  }
  {
    Probe p({1, 3, 10}, rng);
    check1("conv_transpose1d",
           {gaussian_tensor({1, 4, 5}, rng), gaussian_tensor({4, 3, 4}, rng), gaussian_tensor({3}, rng)},
           [=](auto& in) { return p(conv_transpose1d(in[0], in[1], in[2], 2, 1)); });
  }

  // the fused attention kernel's hand-written backward
  record_grad(r, "na_forward", na_grad_case(seed));

  // one full attention block, every block parameter plus the input
  {
    const ModelConfig cfg = mini_config();
    EcgNat<double> model(cfg, mix_seed(seed, 0x626cull));
    Rng brng(mix_seed(seed, 0x626c32ull));
    Tensor<double> u = gaussian_tensor({1, 10, cfg.embed_dim}, brng);  // [batch, len, width]
    const char* names[] = {"ln1.gamma",        "ln1.beta",       "attn.q.weight", "attn.q.bias",
                           "attn.k.weight",    "attn.k.bias",    "attn.v.weight", "attn.v.bias",
                           "attn.proj.weight", "attn.proj.bias", "attn.rel_bias", "ln2.gamma",
                           "ln2.beta",         "mlp.fc1.weight", "mlp.fc1.bias",  "mlp.fc2.weight",
                           "mlp.fc2.bias"};
    std::vector<Tensor<double>> inputs{u};
    for (const char* n : names) inputs.push_back(model.param(std::string("stage0.block0.") + n));
    Probe p({1, 10, cfg.embed_dim}, brng);
    auto fn = [&](std::vector<Tensor<double>>& in) { return p(model.nat_block(in[0], 0, 0)); };
    record_grad(r, "attention block", grad_check(inputs, fn));
  }

  if (!full) return r;

  // whole reduced-size model through both training objectives, probing a
  // couple of coordinates in every parameter tensor (handles share storage
  // with the model, so perturbing them perturbs the model)
  const ModelConfig cfg = mini_config();
  EcgNat<double> model(cfg, mix_seed(seed, 0x6d6f64ull));
  Rng mrng(mix_seed(seed, 0x6d6f6432ull));

  Rng coord_rng(mix_seed(seed, 0x636f6full));
  GradCheckOptions opt;
  opt.max_coords_per_input = 2;
  opt.rng = &coord_rng;
  // the downsampler and decoder relus put corners in the loss surface; probe
  // coordinates whose eps-interval straddles one estimate no derivative
  opt.skip_nonsmooth = true;

  {
    // x is the regression target here, deliberately a leaf — differentiate
    // the parameters, which is the surface training actually uses
    Tensor<double> x = gaussian_tensor({1, cfg.n_leads, cfg.input_len}, mrng);
    std::vector<Tensor<double>> inputs;
    for (auto& [name, t] : model.params()) inputs.push_back(t);

    Rng plan_rng(mix_seed(seed, 0x706cull));
    const std::vector<MaskPlan> plans{
        make_mask_plan(cfg.token_len(), cfg.mask_ratio, cfg.noise_std, plan_rng)};
    auto fn = [&](std::vector<Tensor<double>>&) {
      Tensor<double> tok = zero_mask_variant(model.tokenize(x), plans);
      return recon_loss(x, model.decode(model.encode_tokens(tok)), plans);
    };
    record_grad(r, "model: masked reconstruction loss", grad_check(inputs, fn, opt));
  }

  {
    Tensor<double> x = gaussian_tensor({3, cfg.n_leads, cfg.input_len}, mrng);
    const std::vector<int64_t> labels{0, 0, 1};
    std::vector<Tensor<double>> inputs{x};
    for (auto& [name, t] : model.params()) inputs.push_back(t);

    auto fn = [&](std::vector<Tensor<double>>& in) {
      Tensor<double> z = model.encode(in[0]);
      return total_loss(model.embed(z), labels, model.classify(z), cfg.alpha, cfg.tau);
    };
    record_grad(r, "model: combined classification loss", grad_check(inputs, fn, opt));
  }

  return r;
}

// ---------------------------------------------------------------------------

SuiteResult verify_loss_identities(uint64_t seed) {
  SuiteResult r{"loss-identities"};
  Rng rng(mix_seed(seed, 0x6c6f7373ull));

  const auto scalar = [](const Tensor<double>& t) { return t.data()[0]; };

  // blend endpoints return the component itself: bitwise equality
  {
    Tensor<double> z = gaussian_tensor({4, 6}, rng);
    Tensor<double> logits = gaussian_tensor({4, 3}, rng);
    const std::vector<int64_t> labels{0, 1, 2, 0};
    const double ce = scalar(ce_loss(logits, labels));
    const double sup = scalar(supcon_loss(z, labels, 0.07));
    record(r, scalar(total_loss(z, labels, logits, 0.0, 0.07)) == ce,
           "alpha=0 does not reduce to cross-entropy exactly");
    record(r, scalar(total_loss(z, labels, logits, 1.0, 0.07)) == sup,
           "alpha=1 does not reduce to the contrastive term exactly");
    const double blend = scalar(total_loss(z, labels, logits, 0.3, 0.07));
    record(r, std::abs(blend - (0.3 * sup + 0.7 * ce)) < 1e-12,
           "interior alpha is not the convex blend of the two terms");
  }

  // two samples of one class: the only candidate is the positive, so each
  // anchor's log-ratio is exactly zero
  {
    Tensor<double> z = gaussian_tensor({2, 5}, rng);
    record(r, scalar(supcon_loss(z, {3, 3}, 0.5)) == 0.0,
           "two-sample same-class contrastive loss is not exactly zero");
  }

  // cosine similarity ignores magnitude: rescaling any embedding by a
  // positive factor must not move the loss
  {
    Tensor<double> z = gaussian_tensor({6, 8}, rng);
    const std::vector<int64_t> labels{0, 1, 0, 2, 1, 0};
    const double base = scalar(supcon_loss(z, labels, 0.07));
    Tensor<double> scaled({6, 8});
    for (int64_t i = 0; i < 6; ++i) {
      const double s = rng.uniform(0.1, 10.0);
      for (int64_t j = 0; j < 8; ++j) scaled.data()[i * 8 + j] = z.data()[i * 8 + j] * s;
    }
    const double rescaled = scalar(supcon_loss(scaled, labels, 0.07));
    std::ostringstream what;
    what << "positive rescaling moved the contrastive loss by " << std::abs(rescaled - base);
    record(r, std::abs(rescaled - base) < 1e-9, what.str());
  }

  // three-sample unit-vector case with a closed form: two symmetric anchors
  // contribute -log(e/(e+1)) each, the odd one out has no positive
  {
    Tensor<double> z = Tensor<double>::from({3, 2}, {1, 0, 1, 0, 0, 1});
    const double expected = std::log(1.0 + std::exp(1.0)) - 1.0;
    const double got = scalar(supcon_loss(z, {0, 0, 1}, 1.0));
    std::ostringstream what;
    what << "three-sample hand case: got " << got << ", closed form " << expected;
    record(r, std::abs(got - expected) < 1e-9, what.str());
  }

  // randomized batches against a literal per-anchor transcription of the
  // loss formula (independent cosine, no shared normalization code)
  for (int t = 0; t < 10; ++t) {
    const int64_t B = 2 + int64_t(rng.next_below(7));
    const int64_t E = 2 + int64_t(rng.next_below(6));
    const double tau = rng.uniform(0.05, 1.0);
    Tensor<double> z = gaussian_tensor({B, E}, rng);
    std::vector<int64_t> labels(static_cast<size_t>(B));
    for (auto& l : labels) l = int64_t(rng.next_below(3));

    auto cosine = [&](int64_t i, int64_t j) {
      double dot = 0, ni = 0, nj = 0;
      for (int64_t d = 0; d < E; ++d) {
        dot += z.data()[i * E + d] * z.data()[j * E + d];
        ni += z.data()[i * E + d] * z.data()[i * E + d];
        nj += z.data()[j * E + d] * z.data()[j * E + d];
      }
      return dot / (std::max(std::sqrt(ni), 1e-12) * std::max(std::sqrt(nj), 1e-12));
    };
    double total = 0;
    int64_t anchors = 0;
    for (int64_t i = 0; i < B; ++i) {
      std::vector<int64_t> pos;
      for (int64_t p = 0; p < B; ++p)
        if (p != i && labels[size_t(p)] == labels[size_t(i)]) pos.push_back(p);
      if (pos.empty()) continue;
      ++anchors;
      double den = 0;
      for (int64_t a = 0; a < B; ++a)
        if (a != i) den += std::exp(cosine(i, a) / tau);
      double s = 0;
      for (int64_t p : pos) s += std::log(std::exp(cosine(i, p) / tau) / den);
      total += -s / double(pos.size());
    }
    const double oracle = anchors == 0 ? 0.0 : total / double(anchors);
    const double got = scalar(supcon_loss(z, labels, tau));
    std::ostringstream what;
    what << "randomized batch " << t << ": got " << got << ", oracle " << oracle;
    record(r, std::abs(got - oracle) < 1e-9, what.str());
  }

  return r;
}

// ---------------------------------------------------------------------------

SuiteResult verify_mutation_sanity(uint64_t seed) {
  SuiteResult r{"mutation-sanity"};

  struct FaultGuard {
    FaultGuard() { detail::na_backward_fault() = true; }
    ~FaultGuard() { detail::na_backward_fault() = false; }
  };

  const GradCheckResult clean = na_grad_case(seed);
  record(r, bool(clean), "clean attention backward failed its own gradient check: " + clean.worst);

  GradCheckResult faulty;
  {
    FaultGuard guard;
    faulty = na_grad_case(seed);
  }
  record(r, !bool(faulty),
         "scaled query gradient slipped past the checker (max rel err " +
             std::to_string(faulty.max_rel_err) + ")");

  return r;
}

// ---------------------------------------------------------------------------

std::vector<SuiteResult> run_verification(const std::string& level, uint64_t seed) {
  int oracle_cases = 0;
  bool full = false;
  if (level == "full") {
    oracle_cases = 200;
    full = true;
  } else if (level == "quick") {
    oracle_cases = 40;
  } else {
    throw ConfigError("verify: level must be quick or full, got '" + level + "'");
  }
  return {verify_kernel_oracle(oracle_cases, seed), verify_gradients(seed, full),
          verify_loss_identities(seed), verify_mutation_sanity(seed)};
}

bool all_ok(const std::vector<SuiteResult>& suites) {
  for (const SuiteResult& s : suites)
    if (!s.ok()) return false;
  return !suites.empty();
}

std::string format_report(const std::vector<SuiteResult>& suites) {
  std::ostringstream out;
  int passed = 0, failed = 0;
  for (const SuiteResult& s : suites) {
    out << s.name << ": " << s.passed << " passed, " << s.failed << " failed\n";
    for (const std::string& f : s.failures) out << "  FAIL " << f << "\n";
    passed += s.passed;
    failed += s.failed;
  }
  if (failed == 0)
    out << "VERIFY OK (" << passed << " checks)\n";
  else
    out << "VERIFY FAILED (" << failed << " of " << (passed + failed) << " checks)\n";
  return out.str();
}

}  // namespace ecgnat
