#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ecgnat/gradcheck.hpp"
#include "ecgnat/natten.hpp"

using namespace ecgnat;

namespace {

Tensor<double> rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  t.fill_uniform(rng, lo, hi);
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// windows
// ---------------------------------------------------------------------------

TEST_CASE("neighbor_indices hand cases") {
  CHECK(neighbor_indices(5, 3, 10) == std::vector<int64_t>{4, 5, 6});
  CHECK(neighbor_indices(0, 3, 10) == std::vector<int64_t>{0, 1, 2});
  CHECK(neighbor_indices(9, 3, 10) == std::vector<int64_t>{7, 8, 9});
  CHECK(neighbor_indices(2, 5, 5) == std::vector<int64_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(neighbor_indices(10, 3, 10), ContractError);
  CHECK_THROWS_AS(neighbor_indices(-1, 3, 10), ContractError);
  CHECK_THROWS_AS(neighbor_indices(0, 4, 10), ContractError);
}

TEST_CASE("neighborhood spec validation") {
  CHECK_THROWS_AS(NeighborhoodSpec(4, 2, 8), ContractError);
  CHECK_THROWS_AS(NeighborhoodSpec(-3, 2, 8), ContractError);
  CHECK_THROWS_AS(NeighborhoodSpec(3, 0, 8), ContractError);
  NeighborhoodSpec ok(7, 4, 32);
  CHECK(ok.k == 7);
}

TEST_CASE("neighbor map invariants over random sizes") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t k = 1 + 2 * int64_t(rng.next_below(6));
    const int64_t n = 1 + int64_t(rng.next_below(40));
    NeighborMap m = NeighborMap::build(k, n);
    REQUIRE(int64_t(m.neighbors.size()) == n);
    for (int64_t i = 0; i < n; ++i) {
      const auto& nb = m.neighbors[size_t(i)];
      CHECK(int64_t(nb.size()) == std::min(k, n));
      bool has_self = false;
      for (size_t j = 0; j < nb.size(); ++j) {
        CHECK(nb[j] >= 0);
        CHECK(nb[j] < n);
        if (j) CHECK(nb[j] == nb[j - 1] + 1);  // contiguous, strictly increasing
        has_self = has_self || nb[j] == i;
      }
      CHECK(has_self);
    }
  }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

TEST_CASE("k=1 returns V bitwise") {
  Rng rng(7);
  Tensor<double> q = rand_t(rng, {2, 6, 3});
  Tensor<double> kt = rand_t(rng, {2, 6, 3});
  Tensor<double> v = rand_t(rng, {2, 6, 3});
  Tensor<double> bias = rand_t(rng, {2, 1}, -5, 5);  // bias must not matter
  Tensor<double> out = na_forward(q, kt, v, bias, 1);
  CHECK(std::memcmp(out.data(), v.data(), size_t(v.numel()) * sizeof(double)) == 0);
}

TEST_CASE("n=1 returns V") {
  Rng rng(8);
  Tensor<double> q = rand_t(rng, {1, 3, 1, 4});
  Tensor<double> kt = rand_t(rng, {1, 3, 1, 4});
  Tensor<double> v = rand_t(rng, {1, 3, 1, 4});
  Tensor<double> bias = rand_t(rng, {3, 9});
  Tensor<double> out = na_forward(q, kt, v, bias, 5);
  CHECK(max_abs_diff(out, v) == 0.0);
}

TEST_CASE("k >= n equals unmasked global attention") {
  Rng rng(9);
  const int64_t H = 2, N = 5, D = 3;
  Tensor<double> q = rand_t(rng, {H, N, D});
  Tensor<double> kt = rand_t(rng, {H, N, D});
  Tensor<double> v = rand_t(rng, {H, N, D});
  Tensor<double> bias({H, 2 * 7 - 1});  // zero bias
  Tensor<double> out = na_forward(q, kt, v, bias, 7);

  // plain softmax(QK^T/sqrt(d))V by composition
  Tensor<double> logits = scalar_mul(bmm(q, permute(kt, {0, 2, 1})), 1.0 / std::sqrt(double(D)));
  Tensor<double> global = bmm(softmax_lastdim(logits), v);
  CHECK(max_abs_diff(out, global) < 1e-13);
}

TEST_CASE("attention weights: support size and row sums") {
  // reconstruct the weight matrix by probing with one-hot V columns (d=1)
  Rng rng(11);
  const int64_t N = 8, K = 5;
  Tensor<double> q = rand_t(rng, {1, N, 1});
  Tensor<double> kt = rand_t(rng, {1, N, 1});
  Tensor<double> bias = rand_t(rng, {1, 2 * K - 1});
  std::vector<std::vector<double>> W(size_t(N), std::vector<double>(size_t(N), 0.0));
  for (int64_t j0 = 0; j0 < N; ++j0) {
    Tensor<double> v({1, N, 1});
    v.data()[j0] = 1.0;
    Tensor<double> out = na_forward(q, kt, v, bias, K);
    for (int64_t i = 0; i < N; ++i) W[size_t(i)][size_t(j0)] = out.data()[i];
  }
  NeighborMap m = NeighborMap::build(K, N);
  for (int64_t i = 0; i < N; ++i) {
    double sum = 0;
    int64_t nonzero = 0;
    for (int64_t j = 0; j < N; ++j) {
      sum += W[size_t(i)][size_t(j)];
      const bool inside =
          std::find(m.neighbors[size_t(i)].begin(), m.neighbors[size_t(i)].end(), j) != m.neighbors[size_t(i)].end();
      if (inside) {
        CHECK(W[size_t(i)][size_t(j)] > 0.0);
        ++nonzero;
      } else {
        CHECK(W[size_t(i)][size_t(j)] == 0.0);
      }
    }
    CHECK(nonzero == K);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("oracle equivalence randomized (64-bit)") {
  Rng rng(21);
  const int64_t ks[] = {1, 3, 5, 7};
  for (int trial = 0; trial < 60; ++trial) {
    const int64_t k = ks[rng.next_below(4)];
    const int64_t n = 1 + int64_t(rng.next_below(64));
    const int64_t d = 1 + int64_t(rng.next_below(16));
    const int64_t h = 1 + int64_t(rng.next_below(4));
    const int64_t b = 1 + int64_t(rng.next_below(2));
    Tensor<double> q = rand_t(rng, {b, h, n, d});
    Tensor<double> kt = rand_t(rng, {b, h, n, d});
    Tensor<double> v = rand_t(rng, {b, h, n, d});
    Tensor<double> bias = rand_t(rng, {h, 2 * k - 1});
    Tensor<double> fast = na_forward(q, kt, v, bias, k);
    Tensor<double> ref = na_reference(q, kt, v, bias, k);
    INFO("n=" << n << " k=" << k << " d=" << d << " h=" << h);
    CHECK(max_abs_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("oracle equivalence (32-bit)") {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t n = 4 + int64_t(rng.next_below(32));
    Tensor<float> q({1, 2, n, 8}), kt({1, 2, n, 8}), v({1, 2, n, 8}), bias({2, 5});
    q.fill_gaussian(rng, 0.f, 1.f);
    kt.fill_gaussian(rng, 0.f, 1.f);
    v.fill_gaussian(rng, 0.f, 1.f);
    bias.fill_gaussian(rng, 0.f, 0.5f);
    Tensor<float> fast = na_forward(q, kt, v, bias, 3);
    Tensor<float> ref = na_reference(q, kt, v, bias, 3);
    float m = 0;
    for (int64_t i = 0; i < fast.numel(); ++i) m = std::max(m, std::fabs(fast.data()[i] - ref.data()[i]));
    CHECK(m < 1e-4f);
  }
}

TEST_CASE("streaming reference matches composed reference") {
  Rng rng(23);
  const int64_t H = 3, N = 20, D = 5, K = 5;
  Tensor<double> q = rand_t(rng, {H, N, D});
  Tensor<double> kt = rand_t(rng, {H, N, D});
  Tensor<double> v = rand_t(rng, {H, N, D});
  Tensor<double> bias = rand_t(rng, {H, 2 * K - 1});
  Tensor<double> ref = na_reference(q, kt, v, bias, K);
  Tensor<double> stream({H, N, D});
  na_reference_streaming(q.data(), kt.data(), v.data(), bias.data(), H, N, D, K, stream.data());
  CHECK(max_abs_diff(ref, stream) < 1e-12);
}

TEST_CASE("translation equivariance in the interior") {
  Rng rng(25);
  const int64_t H = 2, N = 16, D = 4, K = 5;
  Tensor<double> q = rand_t(rng, {H, N, D});
  Tensor<double> kt = rand_t(rng, {H, N, D});
  Tensor<double> v = rand_t(rng, {H, N, D});
  Tensor<double> bias = rand_t(rng, {H, 2 * K - 1});

  // shift every sequence right by one (dropping the last position)
  auto shift = [&](const Tensor<double>& t) {
    Tensor<double> s(t.shape());
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t i = 1; i < N; ++i)
        std::memcpy(s.data() + (h * N + i) * D, t.data() + (h * N + i - 1) * D, size_t(D) * sizeof(double));
      std::memcpy(s.data() + h * N * D, t.data() + h * N * D, size_t(D) * sizeof(double));  // pad with first row
    }
    return s;
  };
  Tensor<double> out = na_forward(q, kt, v, bias, K);
  Tensor<double> out_s = na_forward(shift(q), shift(kt), shift(v), bias, K);
  // positions whose window is interior both before and after the shift
  const int64_t half = (K - 1) / 2;
  for (int64_t h = 0; h < H; ++h)
    for (int64_t i = half + 1; i < N - half; ++i)
      for (int64_t c = 0; c < D; ++c)
        CHECK(out_s.data()[(h * N + i) * D + c] ==
              doctest::Approx(out.data()[(h * N + i - 1) * D + c]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST_CASE("gradients match finite differences (n=6, k=3, d=2)") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> q = rand_t(rng, {2, 6, 2});
    Tensor<double> kt = rand_t(rng, {2, 6, 2});
    Tensor<double> v = rand_t(rng, {2, 6, 2});
    Tensor<double> bias = rand_t(rng, {2, 5});
    auto fn = [](std::vector<Tensor<double>>& in) {
      Tensor<double> out = na_forward(in[0], in[1], in[2], in[3], 3);
      Tensor<double> probe(out.shape());
      for (int64_t i = 0; i < probe.numel(); ++i) probe.data()[i] = 0.25 + std::sin(0.7 * double(i + 1));
      return reduce_sum_all(mul(out, probe));
    };
    auto res = grad_check({q, kt, v, bias}, fn);
    INFO(res.worst);
    CHECK(res.ok);
  }
}

TEST_CASE("fused backward equals reference autodiff backward") {
  Rng rng(33);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t k = 1 + 2 * int64_t(rng.next_below(4));
    const int64_t n = 2 + int64_t(rng.next_below(20));
    const int64_t d = 1 + int64_t(rng.next_below(6));
    const int64_t h = 1 + int64_t(rng.next_below(3));
    Tensor<double> q0 = rand_t(rng, {h, n, d});
    Tensor<double> k0 = rand_t(rng, {h, n, d});
    Tensor<double> v0 = rand_t(rng, {h, n, d});
    Tensor<double> b0 = rand_t(rng, {h, 2 * k - 1});
    std::vector<double> seed(size_t(h * n * d));
    for (size_t i = 0; i < seed.size(); ++i) seed[i] = 0.25 + std::sin(0.3 * double(i + 1));

    auto run = [&](bool fused) {
      Tensor<double> q = Tensor<double>::from(q0.shape(), q0.values()).set_requires_grad(true);
      Tensor<double> kt = Tensor<double>::from(k0.shape(), k0.values()).set_requires_grad(true);
      Tensor<double> v = Tensor<double>::from(v0.shape(), v0.values()).set_requires_grad(true);
      Tensor<double> bias = Tensor<double>::from(b0.shape(), b0.values()).set_requires_grad(true);
      Graph<double> g;
      GraphScope<double> scope(g);
      Tensor<double> out = fused ? na_forward(q, kt, v, bias, k) : na_reference(q, kt, v, bias, k);
      g.backward_seeded({{out, seed}});
      std::vector<std::vector<double>> grads{q.grad(), kt.grad(), v.grad(), bias.grad()};
      return grads;
    };
    auto gf = run(true);
    auto gr = run(false);
    INFO("n=" << n << " k=" << k << " d=" << d << " h=" << h);
    for (size_t t = 0; t < 4; ++t) {
      REQUIRE(gf[t].size() == gr[t].size());
      for (size_t i = 0; i < gf[t].size(); ++i) CHECK(gf[t][i] == doctest::Approx(gr[t][i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("bias offsets unreachable when n < k get zero grad") {
  Rng rng(35);
  const int64_t n = 3, k = 7, h = 1, d = 2;
  Tensor<double> q = rand_t(rng, {h, n, d});
  Tensor<double> kt = rand_t(rng, {h, n, d});
  Tensor<double> v = rand_t(rng, {h, n, d});
  Tensor<double> bias = rand_t(rng, {h, 2 * k - 1});
  bias.set_requires_grad(true);
  Graph<double> g;
  {
    GraphScope<double> scope(g);
    Tensor<double> loss = reduce_sum_all(mul(na_forward(q, kt, v, bias, k), na_forward(q, kt, v, bias, k)));
    g.backward(loss);
  }
  // reachable offsets are (j - i) for i,j in [0,3): [-2, 2] -> slots 4..8
  const auto& gb = bias.grad();
  double reachable_mass = 0;
  for (int64_t off = 0; off < 2 * k - 1; ++off) {
    if (off >= 4 && off <= 8)
      reachable_mass += std::fabs(gb[size_t(off)]);
    else
      CHECK(gb[size_t(off)] == 0.0);
  }
  CHECK(reachable_mass > 0.0);
}

TEST_CASE("backward is bitwise reproducible across thread counts") {
  auto run = [](int threads) {
    ThreadPool::configure(threads);
    Rng rng(44);
    Tensor<float> q({2, 3, 24, 8}), kt({2, 3, 24, 8}), v({2, 3, 24, 8}), bias({3, 9});
    q.fill_gaussian(rng, 0.f, 1.f);
    kt.fill_gaussian(rng, 0.f, 1.f);
    v.fill_gaussian(rng, 0.f, 1.f);
    bias.fill_gaussian(rng, 0.f, 0.1f);
    for (auto* t : {&q, &kt, &v, &bias}) t->set_requires_grad(true);
    Graph<float> g;
    std::vector<float> all;
    {
      GraphScope<float> scope(g);
      Tensor<float> out = na_forward(q, kt, v, bias, 5);
      Tensor<float> loss = reduce_mean_all(mul(out, out));
      g.backward(loss);
      all = out.values();
    }
    for (auto* t : {&q, &kt, &v, &bias}) all.insert(all.end(), t->grad().begin(), t->grad().end());
    ThreadPool::configure(1);
    return all;
  };
  for (int threads : {1, 4}) {
    auto a = run(threads);
    auto b = run(threads);
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("fault-injection hook breaks the gradient check") {
  Rng rng(55);
  Tensor<double> q = rand_t(rng, {1, 6, 2});
  Tensor<double> kt = rand_t(rng, {1, 6, 2});
  Tensor<double> v = rand_t(rng, {1, 6, 2});
  Tensor<double> bias = rand_t(rng, {1, 5});
  auto fn = [](std::vector<Tensor<double>>& in) {
    return reduce_sum_all(mul(na_forward(in[0], in[1], in[2], in[3], 3),
                              na_forward(in[0], in[1], in[2], in[3], 3)));
  };
  detail::na_backward_fault() = true;
  auto broken = grad_check({q, kt, v, bias}, fn);
  detail::na_backward_fault() = false;
  CHECK_FALSE(broken.ok);
  auto healthy = grad_check({q, kt, v, bias}, fn);
  CHECK(healthy.ok);
}

// ---------------------------------------------------------------------------
// shape/contract errors and benchmark plumbing
// ---------------------------------------------------------------------------

TEST_CASE("na_forward rejects bad arguments") {
  Tensor<double> q({2, 6, 3}), kt({2, 6, 3}), v({2, 6, 3}), bias({2, 5});
  CHECK_THROWS_AS(na_forward(q, kt, v, bias, 4), ContractError);          // even k
  CHECK_THROWS_AS(na_forward(q, kt, Tensor<double>({2, 6, 4}), bias, 3), ShapeError);
  CHECK_THROWS_AS(na_forward(q, kt, v, Tensor<double>({2, 4}), 3), ShapeError);  // bias wrong width
  CHECK_THROWS_AS(na_forward(q, kt, v, Tensor<double>({1, 5}), 3), ShapeError);  // bias wrong heads
}

TEST_CASE("bench_scaling emits well-formed rows and CSV") {
  auto rows = bench_scaling(3, {8, 16}, 4, 2, 3);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].impl == "na_forward");
  CHECK(rows[1].impl == "na_reference");
  // doubling n doubles the forward estimate and quadruples the reference
  CHECK(rows[2].flops_est == doctest::Approx(2.0 * rows[0].flops_est));
  CHECK(rows[3].flops_est == doctest::Approx(4.0 * rows[1].flops_est));
  for (const auto& r : rows) {
    CHECK(r.mean_ms >= 0.0);
    CHECK(r.median_ms >= 0.0);
  }
  CHECK_THROWS_AS(bench_scaling(3, {16, 8}, 4, 2, 3), ContractError);  // not ascending

  const std::string path = "/tmp/ecgnat_bench_test.csv";
  write_bench_csv(path, rows);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line.rfind("#", 0) == 0);  // formula comment
  std::getline(f, line);
  CHECK(line == "n,impl,flops_est,mean_ms,std_ms");
  int data_lines = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++data_lines;
  CHECK(data_lines == 4);
  std::remove(path.c_str());
}
