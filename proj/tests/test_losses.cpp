#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ecgnat/gradcheck.hpp"
#include "ecgnat/losses.hpp"

using ecgnat::MaskPlan;
using ecgnat::Rng;
using ecgnat::Tensor;

namespace {

// independent supervised-contrastive oracle: literal per-anchor formula,
// no normalization reuse, no max-shift, no shared code with the graph path
double supcon_brute(const std::vector<std::vector<double>>& z, const std::vector<int64_t>& y, double tau) {
  const int64_t B = int64_t(z.size());
  auto cosine = [&](int64_t i, int64_t j) {
    double dot = 0, ni = 0, nj = 0;
    for (size_t d = 0; d < z[size_t(i)].size(); ++d) {
      dot += z[size_t(i)][d] * z[size_t(j)][d];
      ni += z[size_t(i)][d] * z[size_t(i)][d];
      nj += z[size_t(j)][d] * z[size_t(j)][d];
    }
    return dot / (std::max(std::sqrt(ni), 1e-12) * std::max(std::sqrt(nj), 1e-12));
  };
  double total = 0;
  int64_t anchors = 0;
  for (int64_t i = 0; i < B; ++i) {
    std::vector<int64_t> pos;
    for (int64_t p = 0; p < B; ++p)
      if (p != i && y[size_t(p)] == y[size_t(i)]) pos.push_back(p);
    if (pos.empty()) continue;
    ++anchors;
    double den = 0;
    for (int64_t a = 0; a < B; ++a)
      if (a != i) den += std::exp(cosine(i, a) / tau);
    double s = 0;
    for (int64_t p : pos) s += std::log(std::exp(cosine(i, p) / tau) / den);
    total += -s / double(pos.size());
  }
  return anchors == 0 ? 0.0 : total / double(anchors);
}

Tensor<double> embed_tensor(const std::vector<std::vector<double>>& z) {
  const int64_t B = int64_t(z.size()), E = int64_t(z[0].size());
  Tensor<double> t({B, E});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t d = 0; d < E; ++d) t.data()[size_t(i * E + d)] = z[size_t(i)][size_t(d)];
  return t;
}

double eval_scalar(const Tensor<double>& t) { return t.item(); }

}  // namespace

TEST_CASE("mask plans sample the rounded fraction without replacement") {
  Rng rng(5);
  MaskPlan plan = ecgnat::make_mask_plan(625, 0.5, 0.2, rng);
  CHECK(int64_t(plan.positions.size()) == 313);  // round(312.5) away from zero
  CHECK(std::is_sorted(plan.positions.begin(), plan.positions.end()));
  CHECK(std::adjacent_find(plan.positions.begin(), plan.positions.end()) == plan.positions.end());
  for (int64_t p : plan.positions) CHECK((p >= 0 && p < 625));

  CHECK(ecgnat::make_mask_plan(10, 0.2, 0.2, rng).positions.size() == 2);
  CHECK(ecgnat::make_mask_plan(10, 0.04, 0.2, rng).positions.empty());  // round(0.4) == 0
  CHECK(ecgnat::make_mask_plan(10, 1.0, 0.2, rng).positions.size() == 10);

  Rng a(9), b(9);
  CHECK(ecgnat::make_mask_plan(100, 0.5, 0.2, a).positions == ecgnat::make_mask_plan(100, 0.5, 0.2, b).positions);

  CHECK_THROWS_AS(ecgnat::make_mask_plan(10, 0.0, 0.2, rng), ecgnat::ContractError);
  CHECK_THROWS_AS(ecgnat::make_mask_plan(10, 1.5, 0.2, rng), ecgnat::ContractError);
  CHECK_THROWS_AS(ecgnat::make_mask_plan(10, 0.5, -0.1, rng), ecgnat::ContractError);
}

TEST_CASE("gaussian masking corrupts exactly the planned columns") {
  Rng init(3);
  Tensor<double> tok({3, 8});
  tok.fill_gaussian(init, 0.0, 1.0);

  MaskPlan plan;
  plan.noise_std = 0.2;
  plan.positions = {1, 5};

  Rng rng(7);
  Tensor<double> out = ecgnat::apply_mask(tok, plan, rng);
  REQUIRE(out.shape() == tok.shape());
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 8; ++i) {
      const double a = tok.data()[size_t(c * 8 + i)];
      const double b = out.data()[size_t(c * 8 + i)];
      if (i == 1 || i == 5)
        CHECK(a != b);  // additive gaussian, zero draw has probability 0
      else
        CHECK(a == b);
    }

  // identical seeds corrupt identically
  Rng r1(11), r2(11);
  Tensor<double> o1 = ecgnat::apply_mask(tok, plan, r1);
  Tensor<double> o2 = ecgnat::apply_mask(tok, plan, r2);
  for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[size_t(i)] == o2.data()[size_t(i)]);

  // zero noise and empty plans are identities even where masked
  plan.noise_std = 0.0;
  Tensor<double> o3 = ecgnat::apply_mask(tok, plan, rng);
  for (int64_t i = 0; i < o3.numel(); ++i) CHECK(o3.data()[size_t(i)] == tok.data()[size_t(i)]);
  MaskPlan empty;
  Tensor<double> o4 = ecgnat::apply_mask(tok, empty, rng);
  for (int64_t i = 0; i < o4.numel(); ++i) CHECK(o4.data()[size_t(i)] == tok.data()[size_t(i)]);

  MaskPlan bad;
  bad.positions = {8};
  CHECK_THROWS_AS(ecgnat::apply_mask(tok, bad, rng), ecgnat::ContractError);
  Tensor<double> batch({2, 3, 8});
  CHECK_THROWS_AS(ecgnat::apply_mask(batch, std::vector<MaskPlan>{plan}, rng), ecgnat::ContractError);
}

TEST_CASE("zero-mask ablation blanks masked columns and keeps the rest") {
  Rng init(4);
  Tensor<double> tok({2, 3, 6});
  tok.fill_gaussian(init, 0.0, 1.0);

  std::vector<MaskPlan> plans(2);
  plans[0].positions = {0, 4};
  plans[1].positions = {2};

  Tensor<double> out = ecgnat::zero_mask_variant(tok, plans);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 6; ++i) {
        const bool masked = (b == 0 && (i == 0 || i == 4)) || (b == 1 && i == 2);
        const double v = out.data()[size_t((b * 3 + c) * 6 + i)];
        if (masked)
          CHECK(v == 0.0);
        else
          CHECK(v == tok.data()[size_t((b * 3 + c) * 6 + i)]);
      }

  Tensor<double> two({3, 6});
  two.fill_gaussian(init, 0.0, 1.0);
  MaskPlan empty;
  Tensor<double> same = ecgnat::zero_mask_variant(two, empty);
  for (int64_t i = 0; i < same.numel(); ++i) CHECK(same.data()[size_t(i)] == two.data()[size_t(i)]);
}

TEST_CASE("reconstruction loss: masked-span mean squared error") {
  SUBCASE("perfect reconstruction is zero") {
    Rng rng(6);
    Tensor<double> x({2, 12});
    x.fill_gaussian(rng, 0.0, 1.0);
    MaskPlan plan;
    plan.positions = {0, 2};
    CHECK(eval_scalar(ecgnat::recon_loss(x, x, plan)) == 0.0);
  }

  SUBCASE("hand case: x span (1,2) vs zeros, all masked, mean of (1,4)") {
    Tensor<double> x = Tensor<double>::from({1, 2}, {1.0, 2.0});
    Tensor<double> xh({1, 2});
    MaskPlan plan;
    plan.positions = {0};  // token 0 spans columns [0,4) clipped to length 2
    CHECK(eval_scalar(ecgnat::recon_loss(x, xh, plan)) == doctest::Approx(2.5).epsilon(1e-12));
  }

  SUBCASE("mean counts every scalar in every masked span") {
    // L=2, D=8, mask token 1 -> columns 4..7, 16 scalars... 2 leads x 4 cols
    Tensor<double> x({2, 8});
    Tensor<double> xh({2, 8});
    for (int64_t i = 0; i < 16; ++i) x.data()[size_t(i)] = double(i);
    MaskPlan plan;
    plan.positions = {1};
    double expect = 0;
    for (int64_t l = 0; l < 2; ++l)
      for (int64_t c = 4; c < 8; ++c) expect += double(l * 8 + c) * double(l * 8 + c);
    expect /= 8.0;
    CHECK(eval_scalar(ecgnat::recon_loss(x, xh, plan)) == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("perturbing outside masked spans leaves the loss bit-identical") {
    Rng rng(8);
    Tensor<double> x({1, 8}), xh({1, 8});
    x.fill_gaussian(rng, 0.0, 1.0);
    xh.fill_gaussian(rng, 0.0, 1.0);
    MaskPlan plan;
    plan.positions = {0};
    const double before = eval_scalar(ecgnat::recon_loss(x, xh, plan));
    for (int64_t c = 4; c < 8; ++c) xh.data()[size_t(c)] += 100.0;
    CHECK(eval_scalar(ecgnat::recon_loss(x, xh, plan)) == before);
  }

  SUBCASE("batched loss matches the scalar-count-weighted hand sum") {
    Rng rng(9);
    Tensor<double> x({2, 3, 8}), xh({2, 3, 8});
    x.fill_gaussian(rng, 0.0, 1.0);
    xh.fill_gaussian(rng, 0.0, 1.0);
    std::vector<MaskPlan> plans(2);
    plans[0].positions = {0};
    plans[1].positions = {1};
    double sum = 0;
    int64_t count = 0;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t l = 0; l < 3; ++l)
        for (int64_t c = (b == 0 ? 0 : 4); c < (b == 0 ? 4 : 8); ++c) {
          const double d = x.data()[size_t((b * 3 + l) * 8 + c)] - xh.data()[size_t((b * 3 + l) * 8 + c)];
          sum += d * d;
          ++count;
        }
    CHECK(eval_scalar(ecgnat::recon_loss(x, xh, plans)) == doctest::Approx(sum / double(count)).epsilon(1e-12));
  }

  SUBCASE("gradients flow only through masked spans of the reconstruction") {
    Rng rng(10);
    Tensor<double> x({1, 2, 8});
    x.fill_gaussian(rng, 0.0, 1.0);
    std::vector<MaskPlan> plans(1);
    plans[0].positions = {0};
    Tensor<double> xh({1, 2, 8});
    xh.fill_gaussian(rng, 0.0, 1.0);
    auto fn = [&](std::vector<Tensor<double>>& in) { return ecgnat::recon_loss(x, in[0], plans); };
    auto res = ecgnat::grad_check({xh}, fn);
    INFO(res.worst);
    CHECK(bool(res));

    xh.set_requires_grad(true);
    xh.zero_grad();
    {
      ecgnat::Graph<double> g;
      ecgnat::GraphScope<double> scope(g);
      Tensor<double> loss = ecgnat::recon_loss(x, xh, plans);
      g.backward(loss);
    }
    for (int64_t l = 0; l < 2; ++l)
      for (int64_t c = 0; c < 8; ++c) {
        const double gv = xh.grad()[size_t(l * 8 + c)];
        if (c < 4)
          CHECK(gv != 0.0);
        else
          CHECK(gv == 0.0);
      }
  }

  SUBCASE("contract violations") {
    Tensor<double> x({2, 8}), bad({2, 9});
    MaskPlan plan;
    plan.positions = {0};
    CHECK_THROWS_AS(ecgnat::recon_loss(x, bad, plan), ecgnat::ShapeError);
    MaskPlan past;
    past.positions = {2};  // 4*2 = 8 >= D
    CHECK_THROWS_AS(ecgnat::recon_loss(x, x, past), ecgnat::ContractError);
  }
}

TEST_CASE("cosine similarity endpoints and zero-norm guard") {
  Tensor<double> z = Tensor<double>::from({3}, {1.0, -2.0, 0.5});
  CHECK(ecgnat::cosine_sim(z, z) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor<double> neg = Tensor<double>::from({3}, {-1.0, 2.0, -0.5});
  CHECK(ecgnat::cosine_sim(z, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  Tensor<double> ex = Tensor<double>::from({2}, {1.0, 0.0});
  Tensor<double> ey = Tensor<double>::from({2}, {0.0, 1.0});
  CHECK(ecgnat::cosine_sim(ex, ey) == 0.0);
  Tensor<double> zero({2});
  CHECK(ecgnat::cosine_sim(zero, ex) == 0.0);
}

TEST_CASE("supervised contrastive loss identities and oracle agreement") {
  SUBCASE("B=2 same label is exactly zero for any embeddings") {
    Rng rng(12);
    for (int t = 0; t < 5; ++t) {
      Tensor<double> z({2, 4});
      z.fill_gaussian(rng, 0.0, 1.0);
      CHECK(eval_scalar(ecgnat::supcon_loss(z, {3, 3}, 0.07)) == 0.0);
    }
  }

  SUBCASE("no anchor has a positive: zero loss plus warning flag") {
    Tensor<double> z = Tensor<double>::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    bool flag = false;
    CHECK(eval_scalar(ecgnat::supcon_loss(z, {0, 1}, 1.0, &flag)) == 0.0);
    CHECK(flag);
  }

  SUBCASE("B=3 unit-vector case agrees with the brute-force oracle") {
    std::vector<std::vector<double>> z{{1, 0}, {1, 0}, {0, 1}};
    std::vector<int64_t> y{0, 0, 1};
    const double oracle = supcon_brute(z, y, 1.0);
    // two symmetric anchors contributing -log(e/(e+1)) each, third excluded
    CHECK(oracle == doctest::Approx(0.3132616875182228).epsilon(1e-12));
    bool flag = true;
    const double got = eval_scalar(ecgnat::supcon_loss(embed_tensor(z), y, 1.0, &flag));
    CHECK_FALSE(flag);
    CHECK(got == doctest::Approx(oracle).epsilon(1e-12));
  }

  SUBCASE("randomized oracle equivalence") {
    Rng rng(13);
    for (int t = 0; t < 30; ++t) {
      const int64_t B = 2 + int64_t(rng.next_below(7));
      const int64_t E = 2 + int64_t(rng.next_below(4));
      std::vector<std::vector<double>> z(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(E)));
      std::vector<int64_t> y(static_cast<size_t>(B));
      for (auto& row : z)
        for (auto& v : row) v = rng.gaussian();
      for (auto& l : y) l = int64_t(rng.next_below(3));
      const double tau = (t % 3 == 0) ? 0.07 : (t % 3 == 1 ? 0.5 : 1.0);
      const double oracle = supcon_brute(z, y, tau);
      const double got = eval_scalar(ecgnat::supcon_loss(embed_tensor(z), y, tau));
      CHECK(got == doctest::Approx(oracle).epsilon(1e-9));
      CHECK(got >= 0.0);
    }
  }

  SUBCASE("invariance to positive rescaling and batch permutation") {
    Rng rng(14);
    std::vector<std::vector<double>> z(5, std::vector<double>(4));
    std::vector<int64_t> y{0, 1, 0, 2, 1};
    for (auto& row : z)
      for (auto& v : row) v = rng.gaussian();
    const double base = eval_scalar(ecgnat::supcon_loss(embed_tensor(z), y, 0.07));

    auto scaled = z;
    for (auto& row : scaled)
      for (auto& v : row) v *= 3.7;
    CHECK(eval_scalar(ecgnat::supcon_loss(embed_tensor(scaled), y, 0.07)) ==
          doctest::Approx(base).epsilon(1e-12));

    const std::vector<size_t> perm{4, 2, 0, 3, 1};
    std::vector<std::vector<double>> zp(5);
    std::vector<int64_t> yp(5);
    for (size_t i = 0; i < 5; ++i) {
      zp[i] = z[perm[i]];
      yp[i] = y[perm[i]];
    }
    CHECK(eval_scalar(ecgnat::supcon_loss(embed_tensor(zp), yp, 0.07)) ==
          doctest::Approx(base).epsilon(1e-12));
  }

  SUBCASE("pulling a positive closer to its anchor never raises the loss") {
    auto loss_at_angle = [&](double theta) {
      std::vector<std::vector<double>> z{{1, 0}, {std::cos(theta), std::sin(theta)}, {-1, 0.2}};
      return eval_scalar(ecgnat::supcon_loss(embed_tensor(z), {0, 0, 1}, 0.5));
    };
    double prev = loss_at_angle(1.2);
    for (double theta : {0.9, 0.6, 0.3, 0.05}) {
      const double cur = loss_at_angle(theta);
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }

  SUBCASE("gradients match finite differences") {
    Rng rng(15);
    for (double tau : {1.0, 0.07}) {
      Tensor<double> z({4, 3});
      z.fill_gaussian(rng, 0.0, 1.0);
      std::vector<int64_t> y{0, 1, 0, 1};
      auto fn = [&](std::vector<Tensor<double>>& in) { return ecgnat::supcon_loss(in[0], y, tau); };
      auto res = ecgnat::grad_check({z}, fn);
      INFO("tau=" << tau << ": " << res.worst);
      CHECK(bool(res));
    }
  }

  SUBCASE("contract violations") {
    Tensor<double> z({1, 4});
    CHECK_THROWS_AS(ecgnat::supcon_loss(z, {0}, 1.0), ecgnat::ContractError);
    Tensor<double> z2({2, 4});
    CHECK_THROWS_AS(ecgnat::supcon_loss(z2, {0}, 1.0), ecgnat::ContractError);
    CHECK_THROWS_AS(ecgnat::supcon_loss(z2, {0, 0}, 0.0), ecgnat::ContractError);
  }
}

TEST_CASE("cross-entropy: closed forms, limits, gradients") {
  SUBCASE("uniform logits give ln C") {
    Tensor<double> logits({2, 5});
    CHECK(eval_scalar(ecgnat::ce_loss(logits, {1, 4})) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }

  SUBCASE("hand value: logits (2,0), label 0") {
    Tensor<double> logits = Tensor<double>::from({1, 2}, {2.0, 0.0});
    CHECK(eval_scalar(ecgnat::ce_loss(logits, {0})) ==
          doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-9));
    CHECK(eval_scalar(ecgnat::ce_loss(logits, {0})) == doctest::Approx(0.126928011).epsilon(1e-7));
  }

  SUBCASE("infinite-margin limit goes to zero without overflow") {
    Tensor<double> logits = Tensor<double>::from({1, 2}, {1000.0, 0.0});
    CHECK(eval_scalar(ecgnat::ce_loss(logits, {0})) <= 1e-12);
    Tensor<double> wrong = Tensor<double>::from({1, 2}, {1000.0, 0.0});
    CHECK(eval_scalar(ecgnat::ce_loss(wrong, {1})) == doctest::Approx(1000.0).epsilon(1e-9));
  }

  SUBCASE("agrees with the naive log-sum-exp form on random batches") {
    Rng rng(17);
    for (int t = 0; t < 20; ++t) {
      const int64_t B = 1 + int64_t(rng.next_below(6));
      const int64_t C = 2 + int64_t(rng.next_below(5));
      Tensor<double> logits({B, C});
      logits.fill_gaussian(rng, 0.0, 3.0);
      std::vector<int64_t> y(static_cast<size_t>(B));
      for (auto& l : y) l = int64_t(rng.next_below(uint64_t(C)));
      double naive = 0;
      for (int64_t i = 0; i < B; ++i) {
        double s = 0;
        for (int64_t j = 0; j < C; ++j) s += std::exp(logits.data()[size_t(i * C + j)]);
        naive += std::log(s) - logits.data()[size_t(i * C + y[size_t(i)])];
      }
      naive /= double(B);
      CHECK(eval_scalar(ecgnat::ce_loss(logits, y)) == doctest::Approx(naive).epsilon(1e-7));
    }
  }

  SUBCASE("gradients match finite differences") {
    Rng rng(18);
    Tensor<double> logits({3, 4});
    logits.fill_gaussian(rng, 0.0, 2.0);
    std::vector<int64_t> y{2, 0, 3};
    auto fn = [&](std::vector<Tensor<double>>& in) { return ecgnat::ce_loss(in[0], y); };
    auto res = ecgnat::grad_check({logits}, fn);
    INFO(res.worst);
    CHECK(bool(res));
  }

  SUBCASE("label range is enforced") {
    Tensor<double> logits({2, 3});
    CHECK_THROWS_AS(ecgnat::ce_loss(logits, {0, 3}), ecgnat::ContractError);
    CHECK_THROWS_AS(ecgnat::ce_loss(logits, {-1, 0}), ecgnat::ContractError);
    CHECK_THROWS_AS(ecgnat::ce_loss(logits, {0}), ecgnat::ContractError);
  }
}

TEST_CASE("combined objective: exact endpoints and midpoint arithmetic") {
  Rng rng(19);
  Tensor<double> z({3, 4});
  z.fill_gaussian(rng, 0.0, 1.0);
  Tensor<double> logits({3, 3});
  logits.fill_gaussian(rng, 0.0, 1.0);
  std::vector<int64_t> y{0, 0, 1};

  const double sup = eval_scalar(ecgnat::supcon_loss(z, y, 0.07));
  const double ce = eval_scalar(ecgnat::ce_loss(logits, y));

  CHECK(eval_scalar(ecgnat::total_loss(z, y, logits, 0.0, 0.07)) == ce);
  CHECK(eval_scalar(ecgnat::total_loss(z, y, logits, 1.0, 0.07)) == sup);
  CHECK(eval_scalar(ecgnat::total_loss(z, y, logits, 0.5, 0.07)) == 0.5 * sup + 0.5 * ce);
  CHECK(eval_scalar(ecgnat::total_loss(z, y, logits, 0.25, 0.07)) ==
        doctest::Approx(0.25 * sup + 0.75 * ce).epsilon(1e-12));
  CHECK_THROWS_AS(ecgnat::total_loss(z, y, logits, 1.5, 0.07), ecgnat::ContractError);

  // both components feed gradients through the combined loss
  auto fn = [&](std::vector<Tensor<double>>& in) { return ecgnat::total_loss(in[0], y, in[1], 0.5, 0.07); };
  auto res = ecgnat::grad_check({z, logits}, fn);
  INFO(res.worst);
  CHECK(bool(res));
}
