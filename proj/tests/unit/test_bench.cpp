#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "kcmd/bench.hpp"
#include "kcmd/error.hpp"

using namespace kcmd;
namespace fs = std::filesystem;

namespace {

decision::EpisodeTrace trace(const std::string& method, std::uint64_t seed, const std::string& task, std::size_t steps,
                             bool success) {
  decision::EpisodeTrace t;
  t.method = method;
  t.seed = seed;
  t.task_id = task;
  t.mode = "replay";
  t.max_attempts = 20;
  t.success = success;
  t.steps.resize(steps);
  return t;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "kcmd_unit_bench" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

train::TrainConfig small_train() {
  train::TrainConfig c;
  c.arch.extractor = {8};
  c.arch.mean_hidden = {6};
  c.arch.kernel_hidden = {6};
  c.arch.embedding_dim = 3;
  c.folds = 2;
  c.max_epochs_mean = 5;
  c.max_epochs_kernel = 5;
  return c;
}

}  // namespace

TEST_CASE("aggregation counts failures at the cap") {
  const std::vector<decision::EpisodeTrace> ts{trace("sl", 0, "a", 3, true), trace("sl", 0, "b", 7, false),
                                               trace("sl", 1, "a", 5, true), trace("kcmd-ot", 0, "a", 2, true)};
  const auto s = bench::aggregate_metrics(ts, {});
  const auto& sl = s.methods.at("sl");
  CHECK(sl.overall.mean == doctest::Approx((3.0 + 20.0 + 5.0) / 3.0));
  CHECK(sl.overall.max == 20);
  CHECK(sl.overall.failures == 1);
  CHECK(sl.overall.episodes == 3);
  CHECK(sl.per_seed.at(0).mean == doctest::Approx(11.5));
  CHECK(sl.per_seed.at(1).mean == 5.0);
  CHECK(s.methods.at("kcmd-ot").overall.mean == 2.0);

  const std::vector<bench::KshotRow> rows{{"sl", 0, "a", 0, 4.0}, {"sl", 0, "b", 0, 6.0}, {"sl", 1, "a", 10, 3.0}};
  const auto k = bench::aggregate_metrics({}, rows);
  CHECK(k.methods.at("sl").mae_by_shot.at(0) == 5.0);
  CHECK(k.methods.at("sl").mae_by_shot.at(10) == 3.0);
  CHECK_THROWS_AS(bench::aggregate_metrics({}, {}), ConfigError);
  auto live = ts;
  live[1].mode = "live";
  CHECK_THROWS_AS(bench::aggregate_metrics(live, {}), FormatError);
}

TEST_CASE("report recomputes the summary from trace files") {
  const auto in = fresh_dir("report_in"), out = fresh_dir("report_out");
  {
    std::ofstream f(in / "sl.jsonl");
    f << io::trace_json_line(trace("sl", 0, "a", 4, true), false) << "\n"
      << io::trace_json_line(trace("sl", 0, "b", 9, false), false) << "\n";
    std::ofstream g(in / "sl.kshot.json");
    g << bench::kshot_json({{"sl", 0, "a", 0, 12.5}, {"sl", 0, "a", 5, 12.5}});
  }
  const auto s = bench::report(in, out);
  for (const char* f : {"report.json", "report.md", "attempts.csv", "mae.csv", "attempts.svg", "mae.svg"})
    CHECK(fs::exists(out / f));
  const auto j = nlohmann::json::parse(io::read_file(out / "report.json"));
  CHECK(j["sl"]["attempts"]["mean"].get<double>() == 12.0);
  CHECK(j["sl"]["attempts"]["failures"].get<int>() == 1);
  CHECK(j["sl"]["mae_by_shot"]["5"].get<double>() == 12.5);
  CHECK(s.methods.at("sl").overall.max == 20);
  CHECK_THROWS_AS(bench::report(in / "nope", out), ConfigError);
}

TEST_CASE("kshot rows round trip") {
  const std::vector<bench::KshotRow> rows{{"dkmt", 2, "test-01", 10, 1.0 / 7.0}};
  const auto back = bench::parse_kshot_json(bench::kshot_json(rows));
  REQUIRE(back.size() == 1);
  CHECK(back[0].mae == rows[0].mae);
  CHECK(back[0].task_id == "test-01");
  CHECK_THROWS_AS(bench::parse_kshot_json("{}"), FormatError);
}

TEST_CASE("config parsing names the offending field") {
  const auto c = bench::ExperimentConfig::from_json(R"({"seeds": [4], "train": {"folds": 3}})");
  CHECK(c.seeds == std::vector<std::uint64_t>{4});
  CHECK(c.train.folds == 3);
  auto message = [](const std::string& text) {
    try {
      bench::ExperimentConfig::from_json(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(R"({"train": {"lr_mean": "fast"}})").find("config.train.lr_mean") != std::string::npos);
  CHECK(message(R"({"train": {"sinkhorn": {"epsilon": 1}}})").find("config.train.sinkhorn.epsilon") != std::string::npos);
  CHECK(message(R"({"seeds": []})").find("config.seeds") != std::string::npos);
  CHECK(message(R"({"policy": "ucb:-2"})").find("config.policy") != std::string::npos);
  CHECK_FALSE(message("[").empty());
}

TEST_CASE("method names") {
  for (auto m : {bench::Method::sl, bench::Method::dkmt, bench::Method::kcmd_ot, bench::Method::kcmd_random,
                 bench::Method::kcmd_manual})
    CHECK(bench::method_from_string(bench::to_string(m)) == m);
  CHECK(bench::default_policy(bench::Method::sl).kind == decision::Policy::Kind::greedy);
  CHECK(bench::default_policy(bench::Method::kcmd_ot).gamma == 2.0);
  CHECK_THROWS_AS(bench::method_from_string("maml"), ConfigError);
}

TEST_CASE("generated suites load back identically") {
  const auto dir = fresh_dir("suite");
  const auto meta = bench::gen_data(5, dir, 3, 2, 12, 2);
  CHECK(meta.train_ids.size() == 3);
  const auto loaded = bench::load_suite(dir, true);
  const auto mem = bench::make_suite_data(5, 3, 2, 12, 2);
  REQUIRE(loaded.train.size() == mem.train.size());
  REQUIRE(loaded.test.size() == 2);
  CHECK(loaded.test[1].size() == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.train[i].task_id == mem.train[i].task_id);
    CHECK(loaded.train[i].records[7].reward == mem.train[i].records[7].reward);
    CHECK(loaded.train[i].records[7].obs == mem.train[i].records[7].obs);
  }
  CHECK(loaded.test[0][1].records[3].reward == mem.test[0][1].records[3].reward);
  CHECK(loaded.train_materials.size() == 3);
  CHECK(bench::load_suite(dir).train_materials.empty());
  CHECK_THROWS(bench::load_suite(dir / "absent"));
}

TEST_CASE("zero-shot prediction and SL are shot invariant where expected") {
  const auto data = bench::make_suite_data(6, 4, 2, 40, 1);
  const auto cfg = small_train();
  const auto sl = bench::train_method(bench::Method::sl, data, cfg);
  const auto ko = bench::train_method(bench::Method::kcmd_ot, data, cfg, &sl.model);
  const auto rs = bench::eval_kshot(sl.model, "sl", data, {0, 5, 10}, 20, 3, 1);
  const auto rk = bench::eval_kshot(ko.model, "kcmd-ot", data, {0, 5, 10}, 20, 3, 1);
  REQUIRE(rs.size() == 6);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(rs[3 * t].mae == rs[3 * t + 1].mae);
    CHECK(rs[3 * t].mae == rs[3 * t + 2].mae);
    // kCMD keeps the SL mean, so with no support both predict the same.
    CHECK(rk[3 * t].mae == rs[3 * t].mae);
  }
  CHECK_THROWS_AS(bench::eval_kshot(sl.model, "sl", data, {25}, 20, 1, 1), ConfigError);
}

TEST_CASE("replay evaluation covers every test task and repetition") {
  const auto data = bench::make_suite_data(8, 3, 2, 30, 2);
  const auto sl = bench::train_method(bench::Method::sl, data, small_train());
  const auto tr = bench::eval_replay(sl.model, "sl", decision::Policy::greedy(), data, 10, 0);
  CHECK(tr.size() == 4);
  for (const auto& t : tr) {
    CHECK(t.mode == "replay");
    CHECK(t.method == "sl");
    CHECK(t.attempts() <= 10);
    CHECK(t.error.empty());
  }
}
