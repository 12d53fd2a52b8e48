#include "kcmd/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "kcmd/error.hpp"
#include "kcmd/rng.hpp"

namespace kcmd::bench {

using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::sl: return "sl";
    case Method::dkmt: return "dkmt";
    case Method::kcmd_ot: return "kcmd-ot";
    case Method::kcmd_random: return "kcmd-random";
    case Method::kcmd_manual: return "kcmd-manual";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::sl, Method::dkmt, Method::kcmd_ot, Method::kcmd_random, Method::kcmd_manual})
    if (to_string(m) == s) return m;
  throw ConfigError("method: expected sl, dkmt, kcmd-ot, kcmd-random or kcmd-manual, got '" + s + "'");
}

decision::Policy default_policy(Method m) {
  return m == Method::sl ? decision::Policy::greedy() : decision::Policy::ucb(2.0);
}

// --- configuration -------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("config.seeds: at least one seed required");
  if (n_train < 2) throw ConfigError("config.n_train: at least 2 training tasks required");
  if (n_test < 1) throw ConfigError("config.n_test: at least 1 test task required");
  if (n_samples < 5) throw ConfigError("config.n_samples: the threshold rule needs at least 5 samples");
  if (repetitions < 1) throw ConfigError("config.repetitions: must be positive");
  if (max_attempts < 1) throw ConfigError("config.max_attempts: must be positive");
  if (query_size >= n_samples) throw ConfigError("config.query_size: must leave a nonempty support pool");
  for (std::size_t k : shots)
    if (k > n_samples - query_size)
      throw ConfigError("config.shots: " + std::to_string(k) + " shots exceed the support pool of " +
                        std::to_string(n_samples - query_size));
  if (kshot_draws < 1) throw ConfigError("config.kshot_draws: must be positive");
  if (grid.nx == 0 || grid.ny == 0 || grid.n_depths == 0) throw ConfigError("config.grid: empty action grid");
  if (policy) policy->validate();
  try {
    train.validate(n_train);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config.") + e.what());
  }
}

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + it->dump() + ")");
    }
  }

  void object(const char* key, const std::function<void(Reader&)>& f) {
    seen_.push_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    Reader sub(*it, path_ + "." + key);
    f(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw ConfigError(path_ + "." + k + ": unknown field");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "config");
  r.get("seeds", c.seeds);
  r.get("suite_seed", c.suite_seed);
  r.get("n_train", c.n_train);
  r.get("n_test", c.n_test);
  r.get("n_samples", c.n_samples);
  r.get("repetitions", c.repetitions);
  r.get("max_attempts", c.max_attempts);
  r.get("shots", c.shots);
  r.get("query_size", c.query_size);
  r.get("kshot_draws", c.kshot_draws);
  std::string policy;
  r.get("policy", policy);
  if (!policy.empty()) {
    try {
      c.policy = decision::policy_from_string(policy);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.policy: ") + e.what());
    }
  }
  r.object("grid", [&](Reader& g) {
    g.get("nx", c.grid.nx);
    g.get("ny", c.grid.ny);
    g.get("n_depths", c.grid.n_depths);
    g.get("x_min", c.grid.x_min);
    g.get("x_max", c.grid.x_max);
    g.get("y_min", c.grid.y_min);
    g.get("y_max", c.grid.y_max);
  });
  r.object("train", [&](Reader& t) {
    auto& tc = c.train;
    t.get("folds", tc.folds);
    t.get("lr_mean", tc.lr_mean);
    t.get("lr_kernel", tc.lr_kernel);
    t.get("patience", tc.patience);
    t.get("validation_fraction", tc.validation_fraction);
    t.get("l2_anchor_coeff", tc.l2_anchor_coeff);
    t.get("batch_size", tc.batch_size);
    t.get("max_epochs_mean", tc.max_epochs_mean);
    t.get("max_epochs_kernel", tc.max_epochs_kernel);
    t.get("augment", tc.augment);
    t.get("count_split", tc.count_split);
    t.get("seed", tc.seed);
    t.object("sinkhorn", [&](Reader& s) {
      s.get("eps_scale", tc.sinkhorn.eps_scale);
      s.get("eps", tc.sinkhorn.eps);
      s.get("max_iter", tc.sinkhorn.max_iter);
      s.get("tol", tc.sinkhorn.tol);
    });
    t.object("architecture", [&](Reader& a) {
      a.get("extractor", tc.arch.extractor);
      a.get("mean_hidden", tc.arch.mean_hidden);
      a.get("kernel_hidden", tc.arch.kernel_hidden);
      a.get("embedding_dim", tc.arch.embedding_dim);
      a.get("height_scale", tc.arch.height_scale);
    });
  });
  r.finish();
  c.validate();
  return c;
}

std::filesystem::path artifact_path(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("KCMD_ARTIFACT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

// --- suite on disk --------------------------------------------------------------

namespace {

std::string test_file(const std::string& id, std::size_t rep) { return id + ".r" + std::to_string(rep) + ".json"; }

io::GroundTruth truth_of(const sim::Suite& s, const sim::Task& t, const std::string& split, std::size_t index) {
  io::GroundTruth g;
  g.composition = sim::to_string(t.composition);
  g.material_ids = t.material_ids;
  g.materials = s.materials;
  g.suite_seed = s.seed;
  g.split = split;
  g.task_index = index;
  return g;
}

std::uint64_t collect_seed(std::uint64_t suite_seed, std::size_t split, std::size_t task, std::size_t rep) {
  return derive_seed(suite_seed, {400, split, task, rep});
}

}  // namespace

SuiteData make_suite_data(std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t n_samples,
                          std::size_t repetitions, sim::Suite* suite_out) {
  const sim::Suite suite = sim::generate_suite(seed, n_train, n_test);
  SuiteData d;
  d.meta = {seed, n_train, n_test, n_samples, repetitions, {}, {}};
  for (std::size_t i = 0; i < suite.train.size(); ++i) {
    d.train.push_back(sim::collect_offline(suite.train[i], n_samples, collect_seed(seed, 0, i, 0)));
    d.train_materials.push_back(suite.train[i].material_ids);
    d.meta.train_ids.push_back(suite.train[i].id);
  }
  for (std::size_t i = 0; i < suite.test.size(); ++i) {
    std::vector<TaskDataset> reps;
    for (std::size_t r = 0; r < repetitions; ++r)
      reps.push_back(sim::collect_offline(suite.test[i], n_samples, collect_seed(seed, 1, i, r)));
    d.test.push_back(std::move(reps));
    d.meta.test_ids.push_back(suite.test[i].id);
  }
  if (suite_out) *suite_out = suite;
  return d;
}

SuiteMeta gen_data(std::uint64_t seed, const std::filesystem::path& out, std::size_t n_train, std::size_t n_test,
                   std::size_t n_samples, std::size_t repetitions) {
  if (n_samples < 5) throw ConfigError("gen-data: at least 5 samples per task are needed for the threshold");
  if (repetitions < 1) throw ConfigError("gen-data: repetitions must be positive");
  sim::Suite suite;
  const SuiteData d = make_suite_data(seed, n_train, n_test, n_samples, repetitions, &suite);
  const auto issues = sim::check_suite(suite);
  if (!issues.empty()) throw EnvironmentError("generated suite violates its constraints: " + issues.front());
  for (std::size_t i = 0; i < d.train.size(); ++i)
    io::save_dataset(out / "train" / (d.train[i].task_id + ".json"), d.train[i], truth_of(suite, suite.train[i], "train", i));
  for (std::size_t i = 0; i < d.test.size(); ++i)
    for (std::size_t r = 0; r < repetitions; ++r)
      io::save_dataset(out / "test" / test_file(d.test[i][r].task_id, r), d.test[i][r],
                       truth_of(suite, suite.test[i], "test", i));
  const json meta = {{"schema", "kcmd.suite/1"}, {"seed", seed},
                     {"n_train", n_train},       {"n_test", n_test},
                     {"n_samples", n_samples},   {"repetitions", repetitions},
                     {"train", d.meta.train_ids}, {"test", d.meta.test_ids}};
  io::write_file(out / "suite.json", meta.dump(1));
  return d.meta;
}

SuiteMeta load_suite_meta(const std::filesystem::path& dir) {
  const std::string text = io::read_file(dir / "suite.json");
  try {
    const json j = json::parse(text);
    if (j.value("schema", "") != "kcmd.suite/1") throw FormatError((dir / "suite.json").string() + ": unsupported schema");
    SuiteMeta m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_train = j.at("n_train").get<std::size_t>();
    m.n_test = j.at("n_test").get<std::size_t>();
    m.n_samples = j.at("n_samples").get<std::size_t>();
    m.repetitions = j.at("repetitions").get<std::size_t>();
    m.train_ids = j.at("train").get<std::vector<std::string>>();
    m.test_ids = j.at("test").get<std::vector<std::string>>();
    return m;
  } catch (const json::exception& e) {
    throw FormatError((dir / "suite.json").string() + ": " + e.what());
  }
}

SuiteData load_suite(const std::filesystem::path& dir, bool with_train_materials) {
  SuiteData d;
  d.meta = load_suite_meta(dir);
  for (const auto& id : d.meta.train_ids) {
    const auto path = dir / "train" / (id + ".json");
    d.train.push_back(io::load_dataset(path));
    if (with_train_materials) d.train_materials.push_back(io::load_ground_truth(path).material_ids);
  }
  for (const auto& id : d.meta.test_ids) {
    std::vector<TaskDataset> reps;
    for (std::size_t r = 0; r < d.meta.repetitions; ++r) reps.push_back(io::load_dataset(dir / "test" / test_file(id, r)));
    d.test.push_back(std::move(reps));
  }
  return d;
}

// --- training and evaluation -------------------------------------------------------

train::TrainResult train_method(Method method, const SuiteData& data, const train::TrainConfig& cfg,
                                const model::DeepGPModel* sl_model, const ot::DistanceMatrix* distances) {
  switch (method) {
    case Method::sl: return train::train_sl(data.train, cfg);
    case Method::dkmt: return train::train_dkmt(data.train, cfg);
    case Method::kcmd_ot:
    case Method::kcmd_random:
    case Method::kcmd_manual: {
      train::KcmdInputs in;
      in.method = method == Method::kcmd_ot       ? train::SplitMethod::ot
                  : method == Method::kcmd_random ? train::SplitMethod::random
                                                  : train::SplitMethod::manual;
      if (in.method == train::SplitMethod::manual) {
        if (data.train_materials.size() != data.train.size())
          throw ConfigError("kcmd-manual needs the training tasks' material ids");
        in.materials = data.train_materials;
      }
      in.sl_model = sl_model;
      in.distances = distances;
      return train::train_kcmd(data.train, cfg, in);
    }
  }
  throw ConfigError("unknown method");
}

std::vector<decision::EpisodeTrace> eval_replay(const model::DeepGPModel& m, const std::string& label,
                                                decision::Policy policy, const SuiteData& data,
                                                std::size_t max_attempts, std::uint64_t seed) {
  std::vector<decision::EpisodeTrace> out;
  const auto scorer = decision::model_scorer(m, policy);
  for (const auto& reps : data.test)
    for (std::size_t r = 0; r < reps.size(); ++r) {
      std::vector<double> rewards;
      for (const auto& rec : reps[r].records) rewards.push_back(rec.reward);
      const double b = sim::compute_threshold(rewards);
      decision::ReplayEnvironment env(reps[r]);
      auto t = decision::run_episode(scorer, env, b, max_attempts);
      t.method = label;
      t.mode = "replay";
      t.seed = seed;
      t.repetition = static_cast<int>(r);
      out.push_back(std::move(t));
    }
  return out;
}

std::vector<decision::EpisodeTrace> eval_live(const model::DeepGPModel& m, const std::string& label,
                                              decision::Policy policy, const SuiteData& data, const sim::Suite& suite,
                                              const sim::ActionGrid& grid, std::size_t max_attempts,
                                              std::size_t repetitions, std::uint64_t seed) {
  if (suite.test.size() != data.test.size()) throw ConfigError("live evaluation: suite and datasets disagree");
  std::vector<decision::EpisodeTrace> out;
  const auto scorer = decision::model_scorer(m, policy);
  for (std::size_t i = 0; i < suite.test.size(); ++i) {
    std::vector<double> rewards;
    for (const auto& rec : data.test[i].front().records) rewards.push_back(rec.reward);
    const double b = sim::compute_threshold(rewards);
    for (std::size_t r = 0; r < repetitions; ++r) {
      decision::LiveEnvironment env(suite.test[i], grid, derive_seed(seed, {500, i, r}));
      auto t = decision::run_episode(scorer, env, b, max_attempts);
      t.method = label;
      t.mode = "live";
      t.seed = seed;
      t.repetition = static_cast<int>(r);
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::vector<KshotRow> eval_kshot(const model::DeepGPModel& m, const std::string& label, const SuiteData& data,
                                 const std::vector<std::size_t>& shots, std::size_t query_size, std::size_t draws,
                                 std::uint64_t seed) {
  std::vector<KshotRow> rows;
  for (std::size_t t = 0; t < data.test.size(); ++t) {
    const auto& recs = data.test[t].front().records;
    if (query_size >= recs.size()) throw ConfigError("k-shot: query set leaves no support pool");
    std::vector<double> mae(shots.size(), 0.0);
    for (std::size_t d = 0; d < draws; ++d) {
      std::mt19937_64 rng(derive_seed(seed, {600, t, d}));
      std::vector<std::size_t> idx(recs.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<model::Query> queries;
      for (std::size_t i = 0; i < query_size; ++i) queries.push_back({&recs[idx[i]].obs, &recs[idx[i]].action});
      const std::size_t pool = recs.size() - query_size;
      for (std::size_t s = 0; s < shots.size(); ++s) {
        if (shots[s] > pool) throw ConfigError("k-shot: " + std::to_string(shots[s]) + " shots exceed the pool");
        std::vector<Record> support;
        for (std::size_t i = 0; i < shots[s]; ++i) support.push_back(recs[idx[query_size + i]]);
        const auto post = model::predict_batch(m, queries, support);
        double e = 0.0;
        for (std::size_t i = 0; i < query_size; ++i) e += std::abs(post[i].mean - recs[idx[i]].reward);
        mae[s] += e / static_cast<double>(query_size);
      }
    }
    for (std::size_t s = 0; s < shots.size(); ++s)
      rows.push_back({label, seed, data.test[t].front().task_id, shots[s], mae[s] / static_cast<double>(draws)});
  }
  return rows;
}

std::string kshot_json(const std::vector<KshotRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"method", r.method}, {"seed", r.seed}, {"task_id", r.task_id}, {"shots", r.shots}, {"mae", r.mae}});
  return json{{"schema", "kcmd.kshot/1"}, {"rows", std::move(arr)}}.dump(1);
}

std::vector<KshotRow> parse_kshot_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.value("schema", "") != "kcmd.kshot/1") throw FormatError("k-shot file: unsupported schema");
    std::vector<KshotRow> rows;
    for (const auto& r : j.at("rows"))
      rows.push_back({r.at("method").get<std::string>(), r.at("seed").get<std::uint64_t>(),
                      r.at("task_id").get<std::string>(), r.at("shots").get<std::size_t>(), r.at("mae").get<double>()});
    return rows;
  } catch (const json::exception& e) {
    throw FormatError(std::string("k-shot file: ") + e.what());
  }
}

// --- aggregation and report ----------------------------------------------------------

namespace {

struct Acc {
  double sum = 0.0;
  std::size_t max = 0, failures = 0, n = 0;
  void add(const decision::EpisodeTrace& t) {
    const std::size_t a = t.scored_attempts();
    sum += static_cast<double>(a);
    max = std::max(max, a);
    failures += t.success ? 0 : 1;
    ++n;
  }
  AttemptStats stats() const { return {n ? sum / static_cast<double>(n) : 0.0, max, failures, n}; }
};

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string attempts_svg(const Summary& s) {
  const double w = 120.0 * static_cast<double>(std::max<std::size_t>(s.methods.size(), 1)) + 80.0, h = 320.0;
  double top = 1.0;
  for (const auto& [name, m] : s.methods) top = std::max(top, static_cast<double>(m.overall.max));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">attempts to threshold (bar: mean, tick: max)</text>\n";
  double x = 60.0;
  const double base = h - 40.0, scale = (h - 80.0) / top;
  for (const auto& [name, m] : s.methods) {
    const double bh = m.overall.mean * scale;
    os << "<rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"60\" height=\"" << bh << "\" fill=\"#4a7ab5\"/>\n";
    const double my = base - static_cast<double>(m.overall.max) * scale;
    os << "<line x1=\"" << x << "\" x2=\"" << x + 60 << "\" y1=\"" << my << "\" y2=\"" << my
       << "\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << base + 16 << "\" font-family=\"sans-serif\" font-size=\"11\">" << name
       << (m.overall.failures ? " x" : "") << "</text>\n";
    os << "<text x=\"" << x << "\" y=\"" << base - bh - 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << fmt(m.overall.mean, 1) << "</text>\n";
    x += 120.0;
  }
  os << "</svg>\n";
  return os.str();
}

std::string mae_svg(const Summary& s) {
  const double w = 480.0, h = 320.0;
  std::size_t max_shot = 1;
  double top = 1e-9;
  for (const auto& [name, m] : s.methods)
    for (const auto& [k, v] : m.mae_by_shot) {
      max_shot = std::max(max_shot, k);
      top = std::max(top, v);
    }
  const char* colors[] = {"#4a7ab5", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#7f8c8d"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">MAE vs shots</text>\n";
  const double x0 = 50, x1 = w - 140, y0 = h - 40, y1 = 40;
  std::size_t c = 0;
  for (const auto& [name, m] : s.methods) {
    if (m.mae_by_shot.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << colors[c % 6] << "\" stroke-width=\"2\" points=\"";
    for (const auto& [k, v] : m.mae_by_shot)
      os << x0 + (x1 - x0) * static_cast<double>(k) / static_cast<double>(max_shot) << "," << y0 - (y0 - y1) * v / top << " ";
    os << "\"/>\n";
    os << "<text x=\"" << x1 + 10 << "\" y=\"" << y1 + 16.0 * static_cast<double>(c) << "\" fill=\"" << colors[c % 6]
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << name << "</text>\n";
    ++c;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

Summary aggregate_metrics(const std::vector<decision::EpisodeTrace>& traces, const std::vector<KshotRow>& kshot) {
  if (traces.empty() && kshot.empty()) throw ConfigError("aggregate: nothing to aggregate");
  std::map<std::string, Acc> all;
  std::map<std::string, std::map<std::uint64_t, Acc>> by_seed;
  std::map<std::string, std::map<std::pair<std::uint64_t, std::string>, Acc>> by_seed_task;
  std::string mode;
  for (const auto& t : traces) {
    if (mode.empty()) mode = t.mode;
    if (t.mode != mode) throw FormatError("aggregate: traces mix " + mode + " and " + t.mode + " deployment");
    all[t.method].add(t);
    by_seed[t.method][t.seed].add(t);
    by_seed_task[t.method][{t.seed, t.task_id}].add(t);
  }
  Summary s;
  for (const auto& [name, acc] : all) {
    auto& m = s.methods[name];
    m.overall = acc.stats();
    for (const auto& [seed, a] : by_seed[name]) m.per_seed[seed] = a.stats();
    for (const auto& [key, a] : by_seed_task[name]) m.per_seed_task[key] = a.stats();
  }
  std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> shot_acc;
  std::map<std::string, std::map<std::pair<std::uint64_t, std::size_t>, std::pair<double, std::size_t>>> seed_shot_acc;
  for (const auto& r : kshot) {
    auto& a = shot_acc[r.method][r.shots];
    a.first += r.mae;
    ++a.second;
    auto& b = seed_shot_acc[r.method][{r.seed, r.shots}];
    b.first += r.mae;
    ++b.second;
  }
  for (const auto& [name, shots] : shot_acc)
    for (const auto& [k, a] : shots) s.methods[name].mae_by_shot[k] = a.first / static_cast<double>(a.second);
  for (const auto& [name, shots] : seed_shot_acc)
    for (const auto& [k, a] : shots) s.methods[name].mae_by_seed_shot[k] = a.first / static_cast<double>(a.second);
  return s;
}

Summary report(const std::filesystem::path& in, const std::filesystem::path& out) {
  if (!std::filesystem::is_directory(in)) throw ConfigError("report: input directory " + in.string() + " not found");
  std::vector<decision::EpisodeTrace> traces;
  std::vector<KshotRow> kshot;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(in))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    const auto name = p.filename().string();
    if (p.extension() == ".jsonl") {
      auto t = io::load_traces(p);
      traces.insert(traces.end(), t.begin(), t.end());
    } else if (p.extension() == ".json" && name.find("kshot") != std::string::npos) {
      auto r = parse_kshot_json(io::read_file(p));
      kshot.insert(kshot.end(), r.begin(), r.end());
    }
  }
  const Summary s = aggregate_metrics(traces, kshot);

  json j = json::object();
  std::ostringstream md, csv, mcsv;
  md << "# Results\n\n## Attempts to threshold\n\n"
     << "Failed episodes count as the attempt cap in the mean and are listed under failures.\n\n"
     << "| method | mean | max | failures | episodes |\n|---|---|---|---|---|\n";
  csv << "method,seed,task,mean_attempts,max_attempts,failures,episodes\n";
  mcsv << "method,seed,shots,mae\n";
  for (const auto& [name, m] : s.methods) {
    json per_seed = json::object();
    for (const auto& [seed, a] : m.per_seed)
      per_seed[std::to_string(seed)] = {{"mean", a.mean}, {"max", a.max}, {"failures", a.failures}, {"episodes", a.episodes}};
    json rows = json::array();
    for (const auto& [key, a] : m.per_seed_task) {
      rows.push_back({{"seed", key.first}, {"task", key.second}, {"mean", a.mean}, {"max", a.max}, {"failures", a.failures}});
      csv << name << "," << key.first << "," << key.second << "," << a.mean << "," << a.max << "," << a.failures << ","
          << a.episodes << "\n";
    }
    json mae = json::object();
    for (const auto& [k, v] : m.mae_by_shot) mae[std::to_string(k)] = v;
    for (const auto& [key, v] : m.mae_by_seed_shot) mcsv << name << "," << key.first << "," << key.second << "," << v << "\n";
    j[name] = {{"attempts", {{"mean", m.overall.mean}, {"max", m.overall.max}, {"failures", m.overall.failures},
                             {"episodes", m.overall.episodes}}},
               {"per_seed", std::move(per_seed)},
               {"per_seed_task", std::move(rows)},
               {"mae_by_shot", std::move(mae)}};
    if (m.overall.episodes)
      md << "| " << name << " | " << fmt(m.overall.mean) << " | " << m.overall.max << (m.overall.failures ? " x" : "")
         << " | " << m.overall.failures << " | " << m.overall.episodes << " |\n";
  }
  md << "\n## k-shot MAE (cm^3)\n\n";
  std::set<std::size_t> all_shots;
  for (const auto& [name, m] : s.methods)
    for (const auto& [k, v] : m.mae_by_shot) all_shots.insert(k);
  md << "| method |";
  for (auto k : all_shots) md << " " << k << "-shot |";
  md << "\n|---|";
  for (std::size_t i = 0; i < all_shots.size(); ++i) md << "---|";
  md << "\n";
  for (const auto& [name, m] : s.methods) {
    if (m.mae_by_shot.empty()) continue;
    md << "| " << name << " |";
    for (auto k : all_shots) md << " " << (m.mae_by_shot.count(k) ? fmt(m.mae_by_shot.at(k)) : "-") << " |";
    md << "\n";
  }
  io::write_file(out / "report.json", j.dump(1));
  io::write_file(out / "report.md", md.str());
  io::write_file(out / "attempts.csv", csv.str());
  io::write_file(out / "mae.csv", mcsv.str());
  io::write_file(out / "attempts.svg", attempts_svg(s));
  io::write_file(out / "mae.svg", mae_svg(s));
  return s;
}

}  // namespace kcmd::bench
