// kcmd: generate scooping suites, train reward models, run the deployment and
// k-shot protocols, and build reports.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "kcmd/bench.hpp"
#include "kcmd/error.hpp"
#include "kcmd/io.hpp"

namespace fs = std::filesystem;
using namespace kcmd;

namespace {

bench::ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return bench::ExperimentConfig::from_json(io::read_file(bench::artifact_path(path)));
}

std::vector<std::size_t> parse_shots(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("--shots: '" + item + "' is not a nonnegative integer");
    }
  }
  if (out.empty()) throw ConfigError("--shots: empty list");
  return out;
}

int cmd_gen_data(std::uint64_t seed, const std::string& out, std::size_t n_train, std::size_t n_test,
                 std::size_t samples, std::size_t reps) {
  const auto meta = bench::gen_data(seed, bench::artifact_path(out), n_train, n_test, samples, reps);
  std::cout << "wrote " << meta.train_ids.size() << " training and " << meta.test_ids.size() << " test tasks ("
            << reps << " offline sets each) to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& method_name, const std::string& config, const std::string& data,
              const std::string& out, std::optional<std::uint64_t> seed, const std::string& sl_path) {
  const auto method = bench::method_from_string(method_name);
  auto cfg = load_config(config);
  if (seed) cfg.train.seed = *seed;
  const auto suite = bench::load_suite(bench::artifact_path(data), method == bench::Method::kcmd_manual);
  cfg.train.validate(suite.train.size());
  std::optional<model::DeepGPModel> sl;
  if (!sl_path.empty()) {
    sl = io::load_checkpoint(bench::artifact_path(sl_path));
    if (sl->method != "sl") throw ConfigError("--sl: checkpoint " + sl_path + " is not an SL model");
  }
  const auto result = bench::train_method(method, suite, cfg.train, sl ? &*sl : nullptr);
  const fs::path dir = bench::artifact_path(out);
  const std::string manifest = io::manifest_json(result.manifest);
  io::write_file(dir / "manifest.json", manifest);
  io::save_checkpoint(dir / "checkpoint.json", result.model, io::digest(manifest));
  std::cout << "trained " << method_name << " (seed " << cfg.train.seed << ") -> " << (dir / "checkpoint.json").string()
            << "\n";
  return 0;
}

int cmd_eval_deploy(const std::string& model_path, const std::string& tasks, const std::string& policy_name,
                    std::size_t max_attempts, const std::string& mode, std::uint64_t seed, const std::string& out,
                    bool with_obs, const std::string& config, std::size_t repetitions) {
  const auto m = io::load_checkpoint(bench::artifact_path(model_path));
  const auto cfg = load_config(config);
  decision::Policy policy = cfg.policy ? *cfg.policy : bench::default_policy(bench::method_from_string(m.method));
  if (!policy_name.empty()) policy = decision::policy_from_string(policy_name);
  if (max_attempts == 0) throw ConfigError("--max-attempts must be positive");
  const auto data = bench::load_suite(bench::artifact_path(tasks));
  std::vector<decision::EpisodeTrace> traces;
  if (mode == "replay") {
    traces = bench::eval_replay(m, m.method, policy, data, max_attempts, seed);
  } else if (mode == "live") {
    const auto suite = sim::generate_suite(data.meta.seed, data.meta.n_train, data.meta.n_test);
    traces = bench::eval_live(m, m.method, policy, data, suite, cfg.grid, max_attempts,
                              repetitions ? repetitions : data.meta.repetitions, seed);
  } else {
    throw ConfigError("--mode: expected replay or live, got '" + mode + "'");
  }
  std::string lines;
  std::size_t ok = 0;
  for (const auto& t : traces) {
    lines += io::trace_json_line(t, with_obs) + "\n";
    ok += t.success ? 1 : 0;
  }
  io::write_file(bench::artifact_path(out), lines);
  std::cout << traces.size() << " episodes, " << ok << " reached the threshold -> " << out << "\n";
  return 0;
}

int cmd_eval_kshot(const std::string& model_path, const std::string& tasks, const std::string& shots,
                   std::size_t query, std::size_t draws, std::uint64_t seed, const std::string& out) {
  const auto m = io::load_checkpoint(bench::artifact_path(model_path));
  const auto data = bench::load_suite(bench::artifact_path(tasks));
  if (draws == 0) throw ConfigError("--draws must be positive");
  const auto rows = bench::eval_kshot(m, m.method, data, parse_shots(shots), query, draws, seed);
  io::write_file(bench::artifact_path(out), bench::kshot_json(rows));
  for (const auto& r : rows) std::printf("%-12s %-24s %3zu-shot MAE %8.3f\n", r.method.c_str(), r.task_id.c_str(), r.shots, r.mae);
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  const auto s = bench::report(bench::artifact_path(in), bench::artifact_path(out));
  for (const auto& [name, m] : s.methods) {
    if (m.overall.episodes)
      std::printf("%-12s mean attempts %6.2f  max %2zu  failures %zu/%zu\n", name.c_str(), m.overall.mean, m.overall.max,
                  m.overall.failures, m.overall.episodes);
    for (const auto& [k, v] : m.mae_by_shot) std::printf("%-12s %2zu-shot MAE %8.3f\n", name.c_str(), k, v);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scooping reward models with calibrated deep kernels"};
  app.require_subcommand(1);

  std::uint64_t gd_seed = 0;
  std::string gd_out;
  std::size_t gd_train = 12, gd_test = 4, gd_samples = 100, gd_reps = 3;
  auto* gen = app.add_subcommand("gen-data", "Generate a task suite with offline datasets");
  gen->add_option("--seed", gd_seed, "Suite seed")->required();
  gen->add_option("--out", gd_out, "Output directory")->required();
  gen->add_option("--n-train", gd_train, "Training tasks");
  gen->add_option("--n-test", gd_test, "Test tasks");
  gen->add_option("--samples", gd_samples, "Records per offline dataset");
  gen->add_option("--repetitions", gd_reps, "Offline sets per test task");

  std::string tr_method, tr_config, tr_data, tr_out, tr_sl;
  std::optional<std::uint64_t> tr_seed;
  auto* trn = app.add_subcommand("train", "Train a reward model");
  trn->add_option("--method", tr_method, "sl, dkmt, kcmd-ot, kcmd-random or kcmd-manual")->required();
  trn->add_option("--config", tr_config, "Experiment config (JSON)");
  trn->add_option("--data", tr_data, "Suite directory from gen-data")->required();
  trn->add_option("--out", tr_out, "Output directory")->required();
  trn->add_option("--seed", tr_seed, "Training seed (overrides the config)");
  trn->add_option("--sl", tr_sl, "Reuse this SL checkpoint as the kCMD supervised phase");

  std::string ed_model, ed_tasks, ed_policy, ed_mode = "replay", ed_out = "traces.jsonl", ed_config;
  std::size_t ed_max = 20, ed_reps = 0;
  std::uint64_t ed_seed = 0;
  bool ed_obs = false;
  auto* dep = app.add_subcommand("eval-deploy", "Deploy a model until the success threshold is reached");
  dep->add_option("--model", ed_model, "Checkpoint")->required();
  dep->add_option("--tasks", ed_tasks, "Suite directory")->required();
  dep->add_option("--policy", ed_policy, "greedy, ucb or ucb:<gamma> (default per method)");
  dep->add_option("--max-attempts", ed_max, "Attempt budget per episode");
  dep->add_option("--mode", ed_mode, "replay or live");
  dep->add_option("--seed", ed_seed, "Seed tag recorded in traces; also seeds live noise");
  dep->add_option("--repetitions", ed_reps, "Live episodes per task (default: suite repetitions)");
  dep->add_option("--config", ed_config, "Experiment config (action grid, policy)");
  dep->add_option("--out", ed_out, "Trace file (JSON lines)");
  dep->add_flag("--with-observations", ed_obs, "Store the chosen patches in the traces");

  std::string ks_model, ks_tasks, ks_shots = "0,5,10", ks_out = "kshot.json";
  std::size_t ks_query = 80, ks_draws = 5;
  std::uint64_t ks_seed = 0;
  auto* ksh = app.add_subcommand("eval-kshot", "Query MAE given k support shots");
  ksh->add_option("--model", ks_model, "Checkpoint")->required();
  ksh->add_option("--tasks", ks_tasks, "Suite directory")->required();
  ksh->add_option("--shots", ks_shots, "Comma-separated shot counts");
  ksh->add_option("--query", ks_query, "Query set size");
  ksh->add_option("--draws", ks_draws, "Random query/pool splits per task");
  ksh->add_option("--seed", ks_seed, "Seed tag and split seed");
  ksh->add_option("--out", ks_out, "Output JSON");

  std::string rp_in, rp_out;
  auto* rep = app.add_subcommand("report", "Aggregate traces and k-shot results");
  rep->add_option("--in", rp_in, "Directory with *.jsonl traces and *kshot*.json files")->required();
  rep->add_option("--out", rp_out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gd_seed, gd_out, gd_train, gd_test, gd_samples, gd_reps);
    if (trn->parsed()) return cmd_train(tr_method, tr_config, tr_data, tr_out, tr_seed, tr_sl);
    if (dep->parsed())
      return cmd_eval_deploy(ed_model, ed_tasks, ed_policy, ed_max, ed_mode, ed_seed, ed_out, ed_obs, ed_config, ed_reps);
    if (ksh->parsed()) return cmd_eval_kshot(ks_model, ks_tasks, ks_shots, ks_query, ks_draws, ks_seed, ks_out);
    if (rep->parsed()) return cmd_report(rp_in, rp_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
