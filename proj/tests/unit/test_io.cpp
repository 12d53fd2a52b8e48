#include <filesystem>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "kcmd/error.hpp"
#include "kcmd/io.hpp"

using namespace kcmd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "kcmd_unit_io";
  fs::create_directories(dir);
  return dir / name;
}

model::DeepGPModel trained_looking_model() {
  model::Architecture a;
  a.extractor = {5};
  a.mean_hidden = {4};
  a.kernel_hidden = {};
  a.embedding_dim = 2;
  auto m = model::DeepGPModel::create(a, 9);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& t : m.all_parameters())
    for (double& v : t.mutable_data()) v = n(rng) / 3.0;
  m.normalizer = {31.3, 17.25};
  m.method = "kcmd-ot";
  m.has_kernel = true;
  return m;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  const auto m = trained_looking_model();
  const auto path = scratch("ckpt.json");
  io::save_checkpoint(path, m, "abc123");
  const auto back = io::load_checkpoint(path);
  CHECK(back.arch == m.arch);
  CHECK(back.method == "kcmd-ot");
  CHECK(back.has_kernel);
  CHECK(back.normalizer.mean == m.normalizer.mean);
  CHECK(back.normalizer.stddev == m.normalizer.stddev);
  const auto pa = m.all_parameters(), pb = back.all_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].size(); ++j) CHECK(pa[i].at(j) == pb[i].at(j));
  CHECK(io::checkpoint_digest(path) == "abc123");

  io::save_checkpoint(scratch("ckpt2.json"), back, "abc123");
  CHECK(io::read_file(path) == io::read_file(scratch("ckpt2.json")));
}

TEST_CASE("schema and structure mismatches are format errors") {
  const auto path = scratch("bad.json");
  io::write_file(path, R"({"schema": "kcmd.checkpoint/0"})");
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);
  io::write_file(path, "{not json");
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);
  io::write_file(path, R"({"schema": "kcmd.dataset/1", "records": []})");
  CHECK_THROWS_AS(io::load_dataset(path), FormatError);
  CHECK_THROWS_AS(io::read_file(scratch("missing.json")), FormatError);

  const auto m = trained_looking_model();
  io::save_checkpoint(path, m, "");
  auto j = nlohmann::json::parse(io::read_file(path));
  j["tensors"][0]["shape"] = {1, 1};
  io::write_file(path, j.dump());
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);
}

TEST_CASE("dataset files hide ground truth from the learner view") {
  const auto suite = sim::generate_suite(3, 2, 4);
  const auto& task = suite.test[0];
  const auto ds = sim::collect_offline(task, 12, 4);
  io::GroundTruth truth;
  truth.composition = sim::to_string(task.composition);
  truth.material_ids = task.material_ids;
  truth.materials = suite.materials;
  truth.suite_seed = 3;
  truth.split = "test";
  const auto path = scratch("ds.json");
  io::save_dataset(path, ds, truth);

  const auto back = io::load_dataset(path);
  CHECK(back.task_id == ds.task_id);
  REQUIRE(back.records.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(back.records[i].obs == ds.records[i].obs);
    CHECK(back.records[i].reward == ds.records[i].reward);
    CHECK(back.records[i].action.depth == ds.records[i].action.depth);
    CHECK(back.records[i].action.yaw == ds.records[i].action.yaw);
  }
  const auto gt = io::load_ground_truth(path);
  CHECK(gt.material_ids == task.material_ids);
  CHECK(gt.materials.size() == suite.materials.size());
  CHECK(gt.materials[0].peak_volume == suite.materials[0].peak_volume);

  // The learner view survives a corrupted ground-truth block.
  auto j = nlohmann::json::parse(io::read_file(path));
  j["ground_truth"] = "opaque";
  io::write_file(path, j.dump());
  CHECK(io::load_dataset(path).records.size() == 12);
  CHECK_THROWS_AS(io::load_ground_truth(path), FormatError);
}

TEST_CASE("trace lines round trip") {
  decision::EpisodeTrace t;
  t.task_id = "test-02";
  t.method = "sl";
  t.mode = "replay";
  t.seed = 4;
  t.repetition = 2;
  t.threshold = 57.125;
  t.max_attempts = 20;
  t.success = true;
  decision::Step s;
  s.index = 17;
  s.record.obs = Observation::zeros(4, 16, 16);
  s.record.obs.data[5] = 0.25;
  s.record.action = ScoopAction{0.3, 0.25, 5, 0.07, Stiffness::hard};
  s.record.reward = 61.5;
  s.score = 1.0 / 3.0;
  t.steps.push_back(s);

  const auto lean = io::parse_trace_line(io::trace_json_line(t, false));
  CHECK(lean.task_id == t.task_id);
  CHECK(lean.threshold == t.threshold);
  CHECK(lean.scored_attempts() == 1);
  CHECK(lean.steps[0].score == s.score);
  CHECK(lean.steps[0].record.obs.data.empty());
  const auto full = io::parse_trace_line(io::trace_json_line(t, true));
  CHECK(full.steps[0].record.obs == s.record.obs);
  CHECK(io::trace_json_line(full, true) == io::trace_json_line(t, true));
  CHECK_THROWS_AS(io::parse_trace_line("{}"), FormatError);
  CHECK_THROWS_AS(io::parse_trace_line("[1,"), FormatError);
}

TEST_CASE("digest is stable FNV-1a") {
  CHECK(io::digest("") == "cbf29ce484222325");
  CHECK(io::digest("a") == "af63dc4c8601ec8c");
  CHECK(io::digest("abc") != io::digest("abd"));
}
