#include <cmath>
#include <random>
#include <set>

#include "art/errors.hpp"
#include "art/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace art;

namespace {

std::vector<double> random_scores(std::mt19937_64& rng, std::size_t n, int levels) {
  std::uniform_int_distribution<int> d(0, levels - 1);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("topk intersection basics") {
  const std::vector<double> a{4, 3, 2, 1}, b{1, 2, 3, 4};
  CHECK(topk_intersection(a, a, 2) == 1.0);
  CHECK(topk_intersection(a, b, 2) == 0.0);
  CHECK(topk_intersection(a, b, 4) == 1.0);
  CHECK_THROWS_AS(topk_intersection(a, b, 5), InputError);
  const std::vector<double> tied{1, 1, 1, 1};
  CHECK(topk_indices(tied, 2) == std::vector<std::int64_t>{0, 1});
}

TEST_CASE("topk intersection matches set enumeration and is symmetric") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + trial % 41;
    const auto a = random_scores(rng, n, 6), b = random_scores(rng, n, 6);
    const std::int64_t k = 1 + trial % static_cast<int>(n);
    CHECK(topk_intersection(a, b, k) == art::oracle::topk_intersection(a, b, k));
    CHECK(topk_intersection(a, b, k) == topk_intersection(b, a, k));
    std::vector<double> ea(n), eb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ea[i] = std::exp(a[i]);
      eb[i] = 3 * b[i] + 1;
    }
    CHECK(topk_intersection(ea, eb, k) == topk_intersection(a, b, k));
  }
}

TEST_CASE("kendall tau examples") {
  const std::vector<double> up{1, 2, 3, 4, 5}, down{5, 4, 3, 2, 1};
  CHECK(kendall_tau(up, up) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(kendall_tau(up, down) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(kendall_tau(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(kendall_tau(std::vector<double>{1}, std::vector<double>{1}), DegenerateInputError);
  CHECK_THROWS_AS(kendall_tau(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), DegenerateInputError);
}

TEST_CASE("kendall tau equals the pair-enumeration oracle with ties") {
  std::mt19937_64 rng(2);
  double worst = 0;
  for (int seed = 0; seed < 200; ++seed) {
    const std::size_t n = 2 + static_cast<std::size_t>(seed) % 49;
    auto a = random_scores(rng, n, 2 + seed % 7), b = random_scores(rng, n, 2 + seed % 5);
    if (art::oracle::all_tied(a) || art::oracle::all_tied(b)) continue;
    worst = std::max(worst, std::abs(kendall_tau(a, b) - art::oracle::kendall_tau_b(a, b)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("kendall tau invariances") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(30), b(30), fa(30), rb(30);
    for (int i = 0; i < 30; ++i) {
      a[i] = nd(rng);
      b[i] = a[i] + nd(rng);
      fa[i] = std::exp(2 * a[i]);
      rb[i] = -b[i];
    }
    CHECK(kendall_tau(fa, b) == doctest::Approx(kendall_tau(a, b)).epsilon(1e-12));
    CHECK(kendall_tau(a, rb) == doctest::Approx(-kendall_tau(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("cosine alignment") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  Tensor x({3, 4, 4});
  for (auto& v : x.data()) v = nd(rng);
  CHECK(cosine_alignment(x, x * 2.5) == doctest::Approx(1.0));
  CHECK(cosine_alignment(x * 3.0, x * -1.0) == doctest::Approx(-1.0));
  Tensor e1({2}, std::vector<double>{1, 0}), e2({2}, std::vector<double>{0, 5});
  CHECK(cosine_alignment(e1, e2) == 0.0);
  CHECK_THROWS_AS(cosine_alignment(Tensor({3}), Tensor({3}, 1.0)), DegenerateInputError);

  Tensor g({3, 4, 4});
  for (auto& v : g.data()) v = nd(rng);
  CHECK(cosine_alignment(x * 7.0, g) == doctest::Approx(cosine_alignment(x, g)).epsilon(1e-12));
  CHECK(cosine_alignment(x * -7.0, g) == doctest::Approx(-cosine_alignment(x, g)).epsilon(1e-12));
  CHECK(cosine_alignment(x, g, true) == doctest::Approx(cosine_alignment(channel_mean(x), channel_mean(g))));
}

TEST_CASE("squared distance on the unit sphere is twice the cosine distance") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    Tensor x({64}), g({64});
    for (auto& v : x.data()) v = nd(rng);
    for (auto& v : g.data()) v = nd(rng);
    x *= 1.0 / l2_norm(x);
    g *= 1.0 / l2_norm(g);
    const double d = l2_norm(x - g);
    worst = std::max(worst, std::abs(d * d - 2 * (1 - cosine_alignment(x, g))));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("channel mean") {
  Tensor t({2, 1, 2}, std::vector<double>{1, 2, 3, 6});
  const Tensor m = channel_mean(t);
  CHECK(m.shape() == Shape{1, 2});
  CHECK(m[0] == 2.0);
  CHECK(m[1] == 4.0);
}
