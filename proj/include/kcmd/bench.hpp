#pragma once

// Experiment harness: suite generation on disk, training by method name,
// the replay/live deployment and k-shot protocols, and reporting.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kcmd/decision.hpp"
#include "kcmd/io.hpp"
#include "kcmd/terrain.hpp"
#include "kcmd/train.hpp"

namespace kcmd::bench {

enum class Method { sl, dkmt, kcmd_ot, kcmd_random, kcmd_manual };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
// SL ranks by its mean alone; every GP-based method uses UCB with gamma 2.
decision::Policy default_policy(Method m);

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t suite_seed = 0;
  std::size_t n_train = 12;
  std::size_t n_test = 4;
  std::size_t n_samples = 100;
  std::size_t repetitions = 3;
  train::TrainConfig train;
  std::optional<decision::Policy> policy;  // default per method
  std::size_t max_attempts = 20;
  std::vector<std::size_t> shots{0, 5, 10};
  std::size_t query_size = 80;
  std::size_t kshot_draws = 5;
  sim::ActionGrid grid;

  void validate() const;
  // Unknown keys and type mismatches raise ConfigError naming the field path.
  static ExperimentConfig from_json(const std::string& text);
};

// Resolves relative paths against $KCMD_ARTIFACT_ROOT when it is set.
std::filesystem::path artifact_path(const std::filesystem::path& p);

struct SuiteMeta {
  std::uint64_t seed = 0;
  std::size_t n_train = 0, n_test = 0, n_samples = 0, repetitions = 0;
  std::vector<std::string> train_ids, test_ids;
};

// Writes suite.json, train/<id>.json and test/<id>.r<k>.json (one offline
// set per repetition).
SuiteMeta gen_data(std::uint64_t seed, const std::filesystem::path& out, std::size_t n_train = 12,
                   std::size_t n_test = 4, std::size_t n_samples = 100, std::size_t repetitions = 3);

struct SuiteData {
  SuiteMeta meta;
  std::vector<TaskDataset> train;
  std::vector<std::vector<TaskDataset>> test;  // [task][repetition]
  std::vector<std::vector<int>> train_materials;  // filled only on request
};

SuiteMeta load_suite_meta(const std::filesystem::path& dir);
SuiteData load_suite(const std::filesystem::path& dir, bool with_train_materials = false);

// In-memory equivalent of gen_data for harness code.
SuiteData make_suite_data(std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t n_samples,
                          std::size_t repetitions, sim::Suite* suite_out = nullptr);

train::TrainResult train_method(Method method, const SuiteData& data, const train::TrainConfig& cfg,
                                const model::DeepGPModel* sl_model = nullptr,
                                const ot::DistanceMatrix* distances = nullptr);

// Replay deployment on every test task and repetition; B is the 5th largest
// reward of the replay set.
std::vector<decision::EpisodeTrace> eval_replay(const model::DeepGPModel& m, const std::string& label,
                                                decision::Policy policy, const SuiteData& data,
                                                std::size_t max_attempts, std::uint64_t seed);

// Live deployment on the regenerated simulator terrains; B comes from the
// first offline set of each task.
std::vector<decision::EpisodeTrace> eval_live(const model::DeepGPModel& m, const std::string& label,
                                              decision::Policy policy, const SuiteData& data, const sim::Suite& suite,
                                              const sim::ActionGrid& grid, std::size_t max_attempts,
                                              std::size_t repetitions, std::uint64_t seed);

struct KshotRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string task_id;
  std::size_t shots = 0;
  double mae = 0.0;  // averaged over draws
};

std::vector<KshotRow> eval_kshot(const model::DeepGPModel& m, const std::string& label, const SuiteData& data,
                                 const std::vector<std::size_t>& shots, std::size_t query_size, std::size_t draws,
                                 std::uint64_t seed);

std::string kshot_json(const std::vector<KshotRow>& rows);
std::vector<KshotRow> parse_kshot_json(const std::string& text);

struct AttemptStats {
  double mean = 0.0;
  std::size_t max = 0;
  std::size_t failures = 0;
  std::size_t episodes = 0;
};

struct MethodSummary {
  AttemptStats overall;
  std::map<std::uint64_t, AttemptStats> per_seed;
  std::map<std::pair<std::uint64_t, std::string>, AttemptStats> per_seed_task;
  std::map<std::size_t, double> mae_by_shot;
  std::map<std::pair<std::uint64_t, std::size_t>, double> mae_by_seed_shot;
};

struct Summary {
  std::map<std::string, MethodSummary> methods;
};

// Failures count as max_attempts in every mean and are reported separately.
Summary aggregate_metrics(const std::vector<decision::EpisodeTrace>& traces, const std::vector<KshotRow>& kshot);

// Reads every *.jsonl trace file and every *kshot*.json file under `in` and
// writes report.json, report.md, attempts.csv, mae.csv and two SVG charts.
Summary report(const std::filesystem::path& in, const std::filesystem::path& out);

}  // namespace kcmd::bench
