#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgnat/metrics.hpp"
#include "ecgnat/rng.hpp"

using ecgnat::ContractError;
using ecgnat::Rng;
using ecgnat::Tensor;

namespace {

// independent oracle: enumerate every (positive, negative) pair and award
// 1 for concordance, 1/2 for a tie
double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& pos) {
  double num = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (s[i] > s[j])
        num += 1.0;
      else if (s[i] == s[j])
        num += 0.5;
    }
  }
  return num / double(pairs);
}

Tensor<float> score_matrix(const std::vector<std::vector<double>>& rows) {
  Tensor<float> t({int64_t(rows.size()), int64_t(rows[0].size())});
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) t.data()[i * rows[0].size() + j] = float(rows[i][j]);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("accuracy counts exact matches") {
  CHECK(ecgnat::accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
  CHECK(ecgnat::accuracy({1, 2, 0}, {0, 1, 2}) == 0.0);
  CHECK(ecgnat::accuracy({0, 0, 1, 1}, {0, 0, 1, 2}) == 0.75);
  CHECK_THROWS_AS(ecgnat::accuracy({}, {}), ContractError);
  CHECK_THROWS_AS(ecgnat::accuracy({0}, {0, 1}), ContractError);
}

TEST_CASE("macro F1 matches hand-built confusion matrices") {
  bool warned = true;
  CHECK(ecgnat::macro_f1({0, 1, 2}, {0, 1, 2}, 3, &warned) == 1.0);
  CHECK_FALSE(warned);

  // 2-class crossover: both per-class F1 are 0.5
  CHECK(ecgnat::macro_f1({0, 0, 1, 1}, {0, 1, 0, 1}, 2) == doctest::Approx(0.5).epsilon(1e-12));

  // 3-class: per-class F1 = (2/3, 1/2, 4/5)
  const double want = (2.0 / 3.0 + 0.5 + 0.8) / 3.0;
  CHECK(ecgnat::macro_f1({0, 1, 1, 2, 2, 2}, {0, 0, 1, 1, 2, 2}, 3) == doctest::Approx(want).epsilon(1e-12));

  SUBCASE("a class the predictor never emits pulls the mean down") {
    // class 1 present in labels, never predicted: F1_1 = 0
    const double got = ecgnat::macro_f1({0, 0, 0, 0}, {0, 0, 1, 1}, 2, &warned);
    CHECK(got == doctest::Approx(0.5 * (2.0 * 0.5 / 1.5)).epsilon(1e-12));  // (F1_0 = 2/3) / 2
    CHECK_FALSE(warned);  // class 1 appears in labels, so it is not absent
  }

  SUBCASE("a class absent from both sides contributes zero and warns") {
    const double got = ecgnat::macro_f1({0, 1, 0, 1}, {0, 1, 0, 1}, 3, &warned);
    CHECK(got == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(warned);
  }

  SUBCASE("contract") {
    CHECK_THROWS_AS(ecgnat::macro_f1({0, 3}, {0, 1}, 3), ContractError);
    CHECK_THROWS_AS(ecgnat::macro_f1({0, 1}, {0, 4}, 3), ContractError);
    CHECK_THROWS_AS(ecgnat::macro_f1({}, {}, 3), ContractError);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("binary AUROC hand cases") {
  // 3 of the 4 (pos, neg) pairs are concordant, one is not
  CHECK(ecgnat::auroc_binary({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-15));

  // perfect separation
  CHECK(ecgnat::auroc_binary({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  // perfectly wrong
  CHECK(ecgnat::auroc_binary({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  // all scores identical: every pair is a tie
  CHECK(ecgnat::auroc_binary({0.5, 0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0, 0}) == 0.5);

  CHECK_THROWS_AS(ecgnat::auroc_binary({0.1, 0.2}, {1, 1}), ContractError);
  CHECK_THROWS_AS(ecgnat::auroc_binary({0.1, 0.2}, {0, 0}), ContractError);
  CHECK_THROWS_AS(ecgnat::auroc_binary({0.1}, {1}), ContractError);
}

TEST_CASE("rank-statistic AUROC equals pairwise enumeration exactly") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 2 + size_t(rng.next_below(49));
    std::vector<double> s(n);
    std::vector<int> pos(n);
    // coarse score grid forces plenty of ties
    for (size_t i = 0; i < n; ++i) s[i] = std::round(rng.uniform(0.0, 1.0) * 10.0) / 10.0;
    for (size_t i = 0; i < n; ++i) pos[i] = rng.uniform(0.0, 1.0) < 0.5;
    pos[0] = 1;  // guarantee both sides exist
    pos[n - 1] = 0;

    const double got = ecgnat::auroc_binary(s, pos);
    const double want = pairwise_auroc(s, pos);
    CHECK(got == want);  // bitwise: both numerators are exact multiples of 1/2
  }
}

TEST_CASE("AUROC invariances") {
  Rng rng(77);
  std::vector<double> s(40);
  std::vector<int> pos(40);
  for (size_t i = 0; i < 40; ++i) s[i] = std::round(rng.uniform(0.0, 1.0) * 8.0) / 8.0;
  for (size_t i = 0; i < 40; ++i) pos[i] = i % 3 == 0;
  const double base = ecgnat::auroc_binary(s, pos);

  SUBCASE("strictly increasing transforms leave the value unchanged") {
    std::vector<double> t1(40), t2(40);
    for (size_t i = 0; i < 40; ++i) t1[i] = std::exp(3.0 * s[i]) - 1.0;
    for (size_t i = 0; i < 40; ++i) t2[i] = 100.0 * s[i] - 7.0;
    CHECK(ecgnat::auroc_binary(t1, pos) == base);
    CHECK(ecgnat::auroc_binary(t2, pos) == base);
  }

  SUBCASE("sample order does not matter") {
    std::vector<size_t> perm(40);
    for (size_t i = 0; i < 40; ++i) perm[i] = i;
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<int64_t> p64(perm.begin(), perm.end());
      rng.shuffle(p64);
      std::vector<double> sp(40);
      std::vector<int> pp(40);
      for (size_t i = 0; i < 40; ++i) {
        sp[i] = s[size_t(p64[i])];
        pp[i] = pos[size_t(p64[i])];
      }
      CHECK(ecgnat::auroc_binary(sp, pp) == base);
    }
  }
}

TEST_CASE("multi-class AUROC skips single-sided classes") {
  bool warned = false;
  const Tensor<float> scores = score_matrix({{0.8, 0.1, 0.1}, {0.6, 0.2, 0.2}, {0.3, 0.7, 0.0}, {0.2, 0.9, -0.1}});

  SUBCASE("class without positives is skipped with a warning") {
    const double got = ecgnat::auroc(scores, {0, 0, 1, 1}, &warned);
    CHECK(got == 1.0);  // classes 0 and 1 separate perfectly; class 2 skipped
    CHECK(warned);
  }

  SUBCASE("all classes present leaves no warning") {
    const double got = ecgnat::auroc(scores, {0, 0, 1, 2}, &warned);
    CHECK_FALSE(warned);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }

  SUBCASE("every class single-sided is an error") {
    const Tensor<float> two = score_matrix({{0.9, 0.1}, {0.8, 0.2}});
    CHECK_THROWS_AS(ecgnat::auroc(two, {0, 0}, &warned), ContractError);
  }

  SUBCASE("permutation invariance of the macro value") {
    const double base = ecgnat::auroc(scores, {0, 0, 1, 1}, &warned);
    const Tensor<float> shuffled = score_matrix({{0.2, 0.9, -0.1}, {0.8, 0.1, 0.1}, {0.3, 0.7, 0.0}, {0.6, 0.2, 0.2}});
    CHECK(ecgnat::auroc(shuffled, {1, 0, 1, 0}, &warned) == base);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("softmax and argmax helpers") {
  const Tensor<float> logits = score_matrix({{1.0, 1.0, 1.0}, {0.0, 10.0, -10.0}, {2.0, 1.0, 2.0}});
  const Tensor<float> p = ecgnat::softmax_rows(logits);
  for (int64_t i = 0; i < 3; ++i) {
    double row = 0;
    for (int64_t j = 0; j < 3; ++j) {
      row += p.data()[i * 3 + j];
      CHECK(p.data()[i * 3 + j] > 0.0f);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(p.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(p.data()[3 + 1] > 0.99f);

  const auto am = ecgnat::argmax_rows(logits);
  CHECK(am == std::vector<int64_t>{0, 1, 0});  // ties resolve to the lowest index

  SUBCASE("extreme logits stay finite") {
    const Tensor<float> hot = score_matrix({{1000.0, -1000.0, 0.0}});
    const Tensor<float> ph = ecgnat::softmax_rows(hot);
    CHECK(ph.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    for (int64_t j = 0; j < 3; ++j) CHECK(std::isfinite(ph.data()[j]));
  }
}

TEST_CASE("full evaluation bundles metrics and per-class counts") {
  // 6 samples, 3 classes; argmax preds = (0, 1, 1, 2, 2, 2) vs labels (0, 0, 1, 1, 2, 2)
  const Tensor<float> logits = score_matrix({{3.0, 1.0, 0.0},
                                             {1.0, 3.0, 0.0},
                                             {0.0, 3.0, 1.0},
                                             {0.0, 1.0, 3.0},
                                             {1.0, 0.0, 3.0},
                                             {0.0, 0.0, 3.0}});
  const std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  const ecgnat::EvalResult r = ecgnat::evaluate(logits, labels);

  CHECK(r.accuracy == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(r.macro_f1 == doctest::Approx((2.0 / 3.0 + 0.5 + 0.8) / 3.0).epsilon(1e-12));
  CHECK(r.auroc >= 0.0);
  CHECK(r.auroc <= 1.0);
  CHECK_FALSE(r.f1_warning);

  REQUIRE(r.per_class.size() == 3);
  for (const ecgnat::ClassStats& s : r.per_class) {
    CHECK(s.tp + s.tn + s.fp + s.fn == 6);  // one-vs-rest counts cover every sample
    CHECK(s.f1 >= 0.0);
    CHECK(s.f1 <= 1.0);
  }
  CHECK(r.per_class[0].tp == 1);
  CHECK(r.per_class[0].fn == 1);
  CHECK(r.per_class[2].tp == 2);
  CHECK(r.per_class[2].fp == 1);

  const std::string j = r.to_json();
  CHECK(j.find("\"accuracy\"") != std::string::npos);
  CHECK(j.find("\"per_class\"") != std::string::npos);
  CHECK(j.find("\"tp\"") != std::string::npos);
}
