#include <algorithm>
#include <bit>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "kcmd/error.hpp"
#include "kcmd/terrain.hpp"
#include "kcmd/train.hpp"

using namespace kcmd;

namespace {

train::TrainConfig small_config(std::size_t folds) {
  train::TrainConfig c;
  c.arch.extractor = {8};
  c.arch.mean_hidden = {6};
  c.arch.kernel_hidden = {6};
  c.arch.embedding_dim = 3;
  c.folds = folds;
  c.max_epochs_mean = 8;
  c.max_epochs_kernel = 10;
  c.seed = 3;
  return c;
}

const std::vector<TaskDataset>& small_tasks() {
  static const std::vector<TaskDataset> tasks = [] {
    const auto suite = sim::generate_suite(4, 5, 1);
    std::vector<TaskDataset> out;
    for (std::size_t i = 0; i < suite.train.size(); ++i) out.push_back(sim::collect_offline(suite.train[i], 24, i));
    return out;
  }();
  return tasks;
}

struct Best {
  std::size_t overlap = ~std::size_t{0};
  std::size_t imbalance = ~std::size_t{0};
};

std::pair<std::size_t, std::size_t> score(const std::vector<std::vector<int>>& mats, const std::vector<std::size_t>& a,
                                          const std::vector<std::size_t>& b) {
  std::set<int> sa, sb;
  for (std::size_t i : a) sa.insert(mats[i].begin(), mats[i].end());
  for (std::size_t i : b) sb.insert(mats[i].begin(), mats[i].end());
  std::size_t shared = 0;
  for (int m : sa) shared += sb.count(m);
  const std::size_t imb = a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
  return {shared, imb};
}

}  // namespace

TEST_CASE("early stopper halts patience epochs after the best") {
  train::EarlyStopper s(3);
  const std::vector<double> losses{5, 4, 3, 3.5, 3.2, 3.1, 2.0};
  std::size_t stopped_at = losses.size();
  for (std::size_t e = 0; e < losses.size(); ++e) {
    s.update(losses[e]);
    if (s.should_stop()) {
      stopped_at = e;
      break;
    }
  }
  CHECK(stopped_at == 5);
  CHECK(s.best_epoch() == 2);
  CHECK(s.best() == 3.0);

  train::EarlyStopper ties(2);
  CHECK(ties.update(1.0));
  CHECK_FALSE(ties.update(1.0));
  CHECK_FALSE(ties.should_stop());
  CHECK_FALSE(ties.update(1.0));
  CHECK(ties.should_stop());
}

TEST_CASE("manual split is optimal against exhaustive enumeration") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 5;
    std::vector<std::vector<int>> mats(n);
    for (auto& m : mats) {
      m.push_back(static_cast<int>(rng() % 5));
      if (rng() % 2) m.push_back(static_cast<int>(rng() % 5));
    }
    std::set<int> distinct;
    for (const auto& m : mats) distinct.insert(m.begin(), m.end());
    if (distinct.size() < 2) {
      CHECK_THROWS_AS(train::manual_split(mats, 0), SplitError);
      continue;
    }
    const std::size_t ref = rng() % n;
    Best best;
    for (std::uint32_t s = 0; s < (1U << n); ++s) {
      if (!((s >> ref) & 1U) || s == (1U << n) - 1) continue;
      std::vector<std::size_t> a, b;
      for (std::size_t i = 0; i < n; ++i) ((s >> i) & 1U ? a : b).push_back(i);
      const auto [o, im] = score(mats, a, b);
      if (o < best.overlap || (o == best.overlap && im < best.imbalance)) best = {o, im};
    }
    const auto p = train::manual_split(mats, ref, rng());
    CHECK(std::find(p.mean.begin(), p.mean.end(), ref) != p.mean.end());
    CHECK_FALSE(p.kernel.empty());
    CHECK(p.mean.size() + p.kernel.size() == n);
    const auto [o, im] = score(mats, p.mean, p.kernel);
    CHECK(o == best.overlap);
    CHECK(im == best.imbalance);
    CHECK(p.overlap == o);
  }
}

TEST_CASE("manual split input checks") {
  const std::vector<std::vector<int>> one{{1}};
  CHECK_THROWS_AS(train::manual_split(one, 0), SplitError);
  const std::vector<std::vector<int>> two{{1}, {2}};
  CHECK_THROWS_AS(train::manual_split(two, 2), SplitError);
}

TEST_CASE("greedy manual split on many tasks stays a valid partition") {
  std::vector<std::vector<int>> mats;
  for (int i = 0; i < 30; ++i) mats.push_back({i % 6});
  const auto p = train::manual_split(mats, 4);
  CHECK(p.mean.size() + p.kernel.size() == 30);
  CHECK_FALSE(p.kernel.empty());
  CHECK(std::find(p.mean.begin(), p.mean.end(), 4) != p.mean.end());
  CHECK(p.overlap == 0);
}

TEST_CASE("random split plans") {
  const auto& tasks = small_tasks();
  auto cfg = small_config(3);
  train::KcmdInputs in;
  in.method = train::SplitMethod::random;
  const auto plans = train::plan_splits(tasks, cfg, in);
  REQUIRE(plans.size() == 3);
  std::set<std::size_t> refs;
  for (const auto& p : plans) {
    refs.insert(p.ref_task);
    CHECK(p.mean_tasks.size() == 3);
    CHECK(p.kernel_tasks.size() == 2);
    CHECK(std::find(p.mean_tasks.begin(), p.mean_tasks.end(), p.ref_task) != p.mean_tasks.end());
    std::vector<std::size_t> all = p.mean_tasks;
    all.insert(all.end(), p.kernel_tasks.begin(), p.kernel_tasks.end());
    std::sort(all.begin(), all.end());
    CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4});
  }
  CHECK(refs.size() == 3);
  cfg.folds = 6;
  CHECK_THROWS_AS(train::plan_splits(tasks, cfg, in), ConfigError);
}

TEST_CASE("OT split plans follow the median rule on each reference row") {
  const auto& tasks = small_tasks();
  const auto cfg = small_config(2);
  ot::DistanceMatrix d;
  d.n = 5;
  d.values.assign(25, 0.0);
  std::mt19937_64 rng(2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) d.values[i * 5 + j] = d.values[j * 5 + i] = 0.1 + (rng() % 100) / 100.0;
  train::KcmdInputs in;
  in.distances = &d;
  for (const auto& p : train::plan_splits(tasks, cfg, in)) {
    const auto s = ot::median_split(d.row(p.ref_task), p.ref_task);
    CHECK(p.mean_tasks == s.mean);
    CHECK(p.kernel_tasks == s.kernel);
  }
  in.method = train::SplitMethod::manual;
  CHECK_THROWS_AS(train::plan_splits(tasks, cfg, in), SplitError);
}

TEST_CASE("kCMD keeps the supervised weights and collects every fold's residuals") {
  const auto& tasks = small_tasks();
  auto cfg = small_config(3);
  const auto sl = train::train_sl(tasks, cfg);
  train::KcmdInputs in;
  in.method = train::SplitMethod::random;
  in.sl_model = &sl.model;
  const auto r = train::train_kcmd(tasks, cfg, in);

  const auto a = sl.model.extractor_parameters(), b = r.model.extractor_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
  const auto ma = sl.model.mean_head.parameters(), mb = r.model.mean_head.parameters();
  for (std::size_t i = 0; i < ma.size(); ++i)
    CHECK(std::equal(ma[i].data().begin(), ma[i].data().end(), mb[i].data().begin()));
  CHECK(r.model.normalizer.mean == sl.model.normalizer.mean);
  CHECK(r.model.has_kernel);

  std::size_t expected = 0;
  for (const auto& p : r.manifest.splits)
    for (std::size_t t : p.kernel_tasks) expected += tasks[t].records.size();
  CHECK(r.manifest.residual_count == expected);
  CHECK(r.manifest.fold_drift.size() == 3);
  CHECK(r.manifest.method == "kcmd-random");
}

TEST_CASE("a strong anchor pins the fold extractors") {
  const auto& tasks = small_tasks();
  auto cfg = small_config(2);
  cfg.l2_anchor_coeff = 1e6;
  cfg.max_epochs_kernel = 1;
  train::KcmdInputs in;
  in.method = train::SplitMethod::random;
  const auto r = train::train_kcmd(tasks, cfg, in);
  for (double d : r.manifest.fold_drift) CHECK(d < 1e-3);
}

TEST_CASE("training is reproducible for a fixed seed") {
  const auto& tasks = small_tasks();
  const auto cfg = small_config(2);
  const auto a = train::train_sl(tasks, cfg), b = train::train_sl(tasks, cfg);
  const auto pa = a.model.all_parameters(), pb = b.model.all_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
}

TEST_CASE("DKMT reduces its training loss") {
  const auto& tasks = small_tasks();
  auto cfg = small_config(2);
  cfg.max_epochs_kernel = 10;
  cfg.patience = 20;
  const auto r = train::train_dkmt(tasks, cfg);
  REQUIRE_FALSE(r.manifest.curves.empty());
  const auto& c = r.manifest.curves.back();
  REQUIRE(c.train.size() >= 2);
  CHECK(c.train.back() < c.train.front());
  CHECK(r.model.has_kernel);
}

TEST_CASE("config validation") {
  auto cfg = small_config(2);
  cfg.validation_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(5), ConfigError);
  cfg = small_config(2);
  cfg.lr_mean = 0.0;
  CHECK_THROWS_AS(cfg.validate(5), ConfigError);
  CHECK_THROWS_AS(train::train_sl(std::vector<TaskDataset>{}, small_config(2)), ConfigError);
}
