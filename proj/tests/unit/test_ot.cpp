#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "kcmd/error.hpp"
#include "kcmd/ot.hpp"
#include "kcmd/terrain.hpp"

using namespace kcmd;

namespace {

ot::SampleCostParams unit_params(std::size_t hist_len) {
  ot::SampleCostParams p;
  p.bins = hist_len;
  p.ranges.assign(1, {0.0, 1.0});
  return p;
}

std::vector<ot::Sample> random_samples(std::size_t n, std::mt19937_64& rng, double shift = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ot::Sample> out(n);
  for (auto& s : out) {
    s.hist.resize(4);
    double total = 0.0;
    for (double& h : s.hist) total += (h = u(rng));
    for (double& h : s.hist) h /= total;
    for (double& a : s.action) a = u(rng) + shift;
    s.reward = u(rng) + shift;
  }
  return out;
}

// Primal entropic OT by plain Sinkhorn scaling: <P, C> + eps KL(P | a b^T).
double primal_entropic(const std::vector<double>& c, std::size_t n, std::size_t m, double eps) {
  std::vector<double> k(n * m), u(n, 1.0), v(m, 1.0);
  for (std::size_t i = 0; i < n * m; ++i) k[i] = std::exp(-c[i] / eps);
  const double a = 1.0 / static_cast<double>(n), b = 1.0 / static_cast<double>(m);
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += k[i * m + j] * v[j];
      u[i] = a / s;
    }
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i * m + j] * u[i];
      v[j] = b / s;
    }
  }
  double obj = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = u[i] * k[i * m + j] * v[j];
      if (p > 0.0) obj += p * c[i * m + j] + eps * p * std::log(p / (a * b));
    }
  return obj;
}

}  // namespace

TEST_CASE("entropic OT dual value equals the primal objective") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{3, 3}, {4, 6}, {7, 2}}) {
    std::vector<double> c(n * m);
    for (double& x : c) x = u(rng);
    const double eps = 0.2;
    const auto r = ot::entropic_ot(c, n, m, eps, 5000, 1e-12);
    CHECK(r.converged);
    CHECK(r.value == doctest::Approx(primal_entropic(c, n, m, eps)).epsilon(1e-8));
  }
}

TEST_CASE("entropic OT input checks") {
  const std::vector<double> c{0.0, 1.0, 1.0, 0.0};
  CHECK_THROWS_AS(ot::entropic_ot(c, 2, 3, 0.1, 10, 1e-6), DimensionError);
  CHECK_THROWS_AS(ot::entropic_ot(c, 2, 2, 0.0, 10, 1e-6), ConfigError);
  const std::vector<double> skew{0.0, 0.3, 0.9, 0.2, 0.5, 0.1};
  const auto r = ot::entropic_ot(skew, 2, 3, 0.1, 1, 1e-30);
  CHECK_FALSE(r.converged);
  CHECK(r.iterations == 1);
}

TEST_CASE("sinkhorn divergence identities") {
  std::mt19937_64 rng(2);
  const auto p = unit_params(4);
  const auto a = random_samples(20, rng);
  const auto b = random_samples(25, rng, 0.3);
  CHECK(std::abs(ot::sinkhorn_divergence(a, a, p).value) < 1e-6);
  const auto ab = ot::sinkhorn_divergence(a, b, p);
  const auto ba = ot::sinkhorn_divergence(b, a, p);
  CHECK(std::abs(ab.value - ba.value) < 1e-8);
  CHECK(ab.value > 0.0);
  CHECK(ab.converged);
}

TEST_CASE("singleton pair recovers the sample cost") {
  std::mt19937_64 rng(3);
  const auto p = unit_params(4);
  const auto a = random_samples(1, rng);
  const auto b = random_samples(1, rng, 0.5);
  const double c = ot::sample_cost(a[0], b[0], p);
  ot::SinkhornOptions o;
  o.eps = 1e-3 * c;
  CHECK(ot::sinkhorn_divergence(a, b, p, o).value == doctest::Approx(c).epsilon(0.05));
}

TEST_CASE("sample cost is a normalized euclidean distance") {
  ot::Sample a, b;
  a.hist = {0.5, 0.5};
  b.hist = {1.0, 0.0};
  a.action = {0, 0, 0, 0, 0};
  b.action = {3, 0, 0, 4, 0};
  a.reward = 10;
  b.reward = 30;
  ot::SampleCostParams p = unit_params(2);
  p.c_img = 0.5;
  p.c_action = 5.0;
  p.c_reward = 40.0;
  const double expected = std::sqrt(0.5 / 0.25 + 25.0 / 25.0 + 0.25);
  CHECK(ot::sample_cost(a, b, p) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(ot::sample_cost(a, a, p) == 0.0);
}

TEST_CASE("histogram features are per-channel densities") {
  const auto suite = sim::generate_suite(1, 4, 1);
  const auto ds = sim::collect_offline(suite.train[0], 10, 1);
  const std::vector<TaskDataset> db{ds};
  const auto p = ot::SampleCostParams::fit(db, 16);
  CHECK(p.ranges.size() == 4);
  const auto h = ot::histogram_feature(ds.records[0].obs, p);
  REQUIRE(h.size() == 4 * 16);
  for (std::size_t c = 0; c < 4; ++c)
    CHECK(std::accumulate(h.begin() + static_cast<long>(c * 16), h.begin() + static_cast<long>((c + 1) * 16), 0.0) ==
          doctest::Approx(1.0));
  const auto av = ot::action_vector(ScoopAction{0.3, 0.2, 2, 0.05, Stiffness::hard});
  CHECK(av[2] == doctest::Approx(std::acos(-1.0) / 2));
  CHECK(av[4] == 1.0);
}

TEST_CASE("distance matrix is symmetric with a zero diagonal") {
  const auto suite = sim::generate_suite(2, 4, 1);
  std::vector<TaskDataset> db;
  for (const auto& t : suite.train) db.push_back(sim::collect_offline(t, 15, 3));
  const auto p = ot::SampleCostParams::fit(db);
  const auto m = ot::distance_matrix(db, p);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m.at(i, i) == 0.0);
    for (std::size_t j = 0; j < 4; ++j) CHECK(m.at(i, j) == m.at(j, i));
  }
  CHECK(ot::sinkhorn_divergence(db[1], db[2], p).value == m.at(1, 2));
}

TEST_CASE("median split") {
  const std::vector<double> d{0.0, 0.5, 0.2, 0.9, 0.4, 0.7};
  const auto s = ot::median_split(d, 0);
  // Median over {0, .2, .4, .5, .7, .9} is 0.45.
  CHECK(s.mean == std::vector<std::size_t>{0, 2, 4});
  CHECK(s.kernel == std::vector<std::size_t>{1, 3, 5});
  CHECK_FALSE(s.fallback);
  const auto flat = ot::median_split(std::vector<double>(5, 0.0), 2);
  CHECK(flat.fallback);
  CHECK(flat.mean.size() == 3);
  CHECK(std::find(flat.mean.begin(), flat.mean.end(), 2) != flat.mean.end());
  CHECK_THROWS_AS(ot::median_split(std::vector<double>{0.0}, 0), SplitError);
  CHECK_THROWS_AS(ot::median_split(d, 9), SplitError);
  CHECK_THROWS_AS(ot::median_split(std::vector<double>{0.0, std::nan("")}, 0), SplitError);
}

TEST_CASE("median split property: partition with the reference on the mean side") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 12;
    const std::size_t ref = rng() % n;
    std::vector<double> d(n);
    for (double& x : d) x = u(rng);
    d[ref] = 0.0;
    const auto s = ot::median_split(d, ref);
    std::vector<std::size_t> all = s.mean;
    all.insert(all.end(), s.kernel.begin(), s.kernel.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(n);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(all == expect);
    CHECK(std::find(s.mean.begin(), s.mean.end(), ref) != s.mean.end());
    CHECK_FALSE(s.kernel.empty());
    for (std::size_t i : s.mean)
      for (std::size_t j : s.kernel) CHECK(d[i] <= d[j]);
  }
}

TEST_CASE("count split") {
  const std::vector<double> d{0.3, 0.0, 0.3, 0.1, 0.9};
  const auto s = ot::count_split(d, 1);
  CHECK(s.mean == std::vector<std::size_t>{0, 1, 3});
  CHECK(s.kernel == std::vector<std::size_t>{2, 4});
}
