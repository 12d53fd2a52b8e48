#include "kcmd/io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "kcmd/error.hpp"

namespace kcmd::io {

using nlohmann::json;

namespace {

json to_json(const Observation& o) {
  return {{"channels", o.channels}, {"height", o.height}, {"width", o.width}, {"data", o.data}};
}

Observation observation_from(const json& j) {
  Observation o;
  o.channels = j.at("channels").get<std::size_t>();
  o.height = j.at("height").get<std::size_t>();
  o.width = j.at("width").get<std::size_t>();
  o.data = j.at("data").get<std::vector<double>>();
  if (o.data.size() != o.channels * o.height * o.width) throw FormatError("observation data size mismatch");
  return o;
}

json to_json(const ScoopAction& a) {
  return {{"x", a.x}, {"y", a.y}, {"yaw", a.yaw}, {"depth", a.depth}, {"stiffness", static_cast<int>(a.stiffness)}};
}

ScoopAction action_from(const json& j) {
  ScoopAction a;
  a.x = j.at("x").get<double>();
  a.y = j.at("y").get<double>();
  a.yaw = j.at("yaw").get<int>();
  a.depth = j.at("depth").get<double>();
  const int s = j.at("stiffness").get<int>();
  if (s != 0 && s != 1) throw FormatError("stiffness must be 0 or 1");
  a.stiffness = static_cast<Stiffness>(s);
  return a;
}

json to_json(const TrajectoryConstants& t) {
  return {{"attack_angle_deg", t.attack_angle_deg},
          {"drag_length_m", t.drag_length_m},
          {"closing_angle_deg", t.closing_angle_deg},
          {"lift_height_m", t.lift_height_m},
          {"linear_stiffness_n_per_m", t.linear_stiffness_n_per_m},
          {"torsion_stiffness_nm_per_rad", t.torsion_stiffness_nm_per_rad}};
}

json to_json(const sim::LatentMaterial& m) {
  return {{"id", m.id},
          {"name", m.name},
          {"color", m.color},
          {"texture", m.texture},
          {"peak_volume", m.peak_volume},
          {"peak_depth", m.peak_depth},
          {"depth_width", m.depth_width},
          {"jam_penalty", m.jam_penalty},
          {"stiffness_gain", m.stiffness_gain},
          {"novel", m.novel}};
}

sim::LatentMaterial material_from(const json& j) {
  sim::LatentMaterial m;
  m.id = j.at("id").get<int>();
  m.name = j.at("name").get<std::string>();
  m.color = j.at("color").get<std::array<double, 3>>();
  m.texture = j.at("texture").get<double>();
  m.peak_volume = j.at("peak_volume").get<double>();
  m.peak_depth = j.at("peak_depth").get<double>();
  m.depth_width = j.at("depth_width").get<double>();
  m.jam_penalty = j.at("jam_penalty").get<double>();
  m.stiffness_gain = j.at("stiffness_gain").get<double>();
  m.novel = j.at("novel").get<bool>();
  return m;
}

json parse_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void expect_schema(const json& j, const char* schema, const std::filesystem::path& path) {
  const auto it = j.find("schema");
  if (it == j.end() || !it->is_string()) throw FormatError(path.string() + ": missing schema tag");
  if (it->get<std::string>() != schema)
    throw FormatError(path.string() + ": schema " + it->get<std::string>() + " is not the supported " + schema);
}

template <class F>
auto guarded(const std::filesystem::path& path, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

json tensor_json(const ad::Tensor& t) {
  return {{"name", t.name()}, {"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

json kernel_json(const gp::KernelParams& kp) {
  return {{"log_lengthscale", kp.log_lengthscale}, {"log_outputscale", kp.log_outputscale}, {"log_noise", kp.log_noise}};
}

json arch_json(const model::Architecture& a) {
  return {{"channels", a.channels},           {"patch_height", a.patch_height}, {"patch_width", a.patch_width},
          {"extractor", a.extractor},         {"mean_hidden", a.mean_hidden},   {"kernel_hidden", a.kernel_hidden},
          {"embedding_dim", a.embedding_dim}, {"height_scale", a.height_scale}};
}

model::Architecture arch_from(const json& j) {
  model::Architecture a;
  a.channels = j.at("channels").get<std::size_t>();
  a.patch_height = j.at("patch_height").get<std::size_t>();
  a.patch_width = j.at("patch_width").get<std::size_t>();
  a.extractor = j.at("extractor").get<std::vector<std::size_t>>();
  a.mean_hidden = j.at("mean_hidden").get<std::vector<std::size_t>>();
  a.kernel_hidden = j.at("kernel_hidden").get<std::vector<std::size_t>>();
  a.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  a.height_scale = j.at("height_scale").get<double>();
  return a;
}

json config_json(const train::TrainConfig& c) {
  return {{"architecture", arch_json(c.arch)},
          {"folds", c.folds},
          {"lr_mean", c.lr_mean},
          {"lr_kernel", c.lr_kernel},
          {"patience", c.patience},
          {"validation_fraction", c.validation_fraction},
          {"l2_anchor_coeff", c.l2_anchor_coeff},
          {"batch_size", c.batch_size},
          {"max_epochs_mean", c.max_epochs_mean},
          {"max_epochs_kernel", c.max_epochs_kernel},
          {"augment", c.augment},
          {"count_split", c.count_split},
          {"sinkhorn", {{"eps_scale", c.sinkhorn.eps_scale}, {"eps", c.sinkhorn.eps},
                        {"max_iter", c.sinkhorn.max_iter}, {"tol", c.sinkhorn.tol}}},
          {"seed", c.seed}};
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << bytes;
  if (!out) throw FormatError("write failed for " + path.string());
}

std::string digest(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void save_dataset(const std::filesystem::path& path, const TaskDataset& data, const GroundTruth& truth) {
  json records = json::array();
  for (const auto& r : data.records)
    records.push_back({{"obs", to_json(r.obs)}, {"action", to_json(r.action)}, {"reward", r.reward}});
  json materials = json::array();
  for (const auto& m : truth.materials) materials.push_back(to_json(m));
  const json j = {{"schema", kDatasetSchema},
                  {"task_id", data.task_id},
                  {"trajectory", to_json(TrajectoryConstants{})},
                  {"records", std::move(records)},
                  {"ground_truth",
                   {{"composition", truth.composition},
                    {"material_ids", truth.material_ids},
                    {"materials", std::move(materials)},
                    {"suite_seed", truth.suite_seed},
                    {"split", truth.split},
                    {"task_index", truth.task_index}}}};
  write_file(path, j.dump());
}

TaskDataset load_dataset(const std::filesystem::path& path) {
  const json j = parse_file(path);
  expect_schema(j, kDatasetSchema, path);
  return guarded(path, [&] {
    TaskDataset d;
    d.task_id = j.at("task_id").get<std::string>();
    for (const auto& r : j.at("records")) {
      Record rec;
      rec.obs = observation_from(r.at("obs"));
      rec.action = action_from(r.at("action"));
      rec.reward = r.at("reward").get<double>();
      d.records.push_back(std::move(rec));
    }
    return d;
  });
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  const json j = parse_file(path);
  expect_schema(j, kDatasetSchema, path);
  return guarded(path, [&] {
    const auto& g = j.at("ground_truth");
    GroundTruth t;
    t.composition = g.at("composition").get<std::string>();
    t.material_ids = g.at("material_ids").get<std::vector<int>>();
    for (const auto& m : g.at("materials")) t.materials.push_back(material_from(m));
    t.suite_seed = g.at("suite_seed").get<std::uint64_t>();
    t.split = g.at("split").get<std::string>();
    t.task_index = g.at("task_index").get<std::size_t>();
    return t;
  });
}

void save_checkpoint(const std::filesystem::path& path, const model::DeepGPModel& m,
                     const std::string& manifest_digest) {
  json tensors = json::array();
  for (const auto& t : m.all_parameters()) tensors.push_back(tensor_json(t));
  const json j = {{"schema", kCheckpointSchema},
                  {"method", m.method},
                  {"has_kernel", m.has_kernel},
                  {"architecture", arch_json(m.arch)},
                  {"normalizer", {{"mean", m.normalizer.mean}, {"stddev", m.normalizer.stddev}}},
                  {"kernel", kernel_json(m.kernel.values())},
                  {"tensors", std::move(tensors)},
                  {"manifest_digest", manifest_digest}};
  write_file(path, j.dump());
}

model::DeepGPModel load_checkpoint(const std::filesystem::path& path) {
  const json j = parse_file(path);
  expect_schema(j, kCheckpointSchema, path);
  return guarded(path, [&] {
    const auto arch = arch_from(j.at("architecture"));
    auto m = model::DeepGPModel::create(arch, 0);
    m.method = j.at("method").get<std::string>();
    m.has_kernel = j.at("has_kernel").get<bool>();
    m.normalizer.mean = j.at("normalizer").at("mean").get<double>();
    m.normalizer.stddev = j.at("normalizer").at("stddev").get<double>();
    auto params = m.all_parameters();
    const auto& ts = j.at("tensors");
    if (ts.size() != params.size())
      throw FormatError(path.string() + ": expected " + std::to_string(params.size()) + " tensors, found " +
                        std::to_string(ts.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = ts[i];
      if (t.at("name").get<std::string>() != params[i].name())
        throw FormatError(path.string() + ": tensor " + std::to_string(i) + " is " + t.at("name").get<std::string>() +
                          ", expected " + params[i].name());
      if (t.at("shape").get<ad::Shape>() != params[i].shape())
        throw FormatError(path.string() + ": shape mismatch for " + params[i].name());
      const auto data = t.at("data").get<std::vector<double>>();
      if (data.size() != params[i].size()) throw FormatError(path.string() + ": data size mismatch for " + params[i].name());
      std::copy(data.begin(), data.end(), params[i].mutable_data().begin());
    }
    return m;
  });
}

std::string checkpoint_digest(const std::filesystem::path& path) {
  const json j = parse_file(path);
  return guarded(path, [&] { return j.at("manifest_digest").get<std::string>(); });
}

std::string manifest_json(const train::Manifest& m) {
  json splits = json::array();
  for (const auto& s : m.splits)
    splits.push_back({{"fold", s.fold},
                      {"ref_task", s.ref_task},
                      {"mean_tasks", s.mean_tasks},
                      {"kernel_tasks", s.kernel_tasks},
                      {"method", train::to_string(s.method)},
                      {"fallback", s.fallback},
                      {"overlap", s.overlap}});
  json curves = json::array();
  for (const auto& c : m.curves)
    curves.push_back({{"name", c.name}, {"train", c.train}, {"validation", c.validation}, {"best_epoch", c.best_epoch}});
  json log = json::array();
  for (const auto& e : m.log) log.push_back({{"phase", e.phase}, {"fold", e.fold}, {"message", e.message}});
  json j = {{"method", m.method},
            {"seed", m.seed},
            {"config", config_json(m.config)},
            {"splits", std::move(splits)},
            {"curves", std::move(curves)},
            {"log", std::move(log)},
            {"residual_count", m.residual_count},
            {"kernel", kernel_json(m.kernel)},
            {"fold_drift", m.fold_drift}};
  if (m.distances)
    j["distances"] = {{"n", m.distances->n}, {"values", m.distances->values}, {"all_converged", m.distances->all_converged}};
  return j.dump(1);
}

void save_manifest(const std::filesystem::path& path, const train::Manifest& m) { write_file(path, manifest_json(m)); }

std::string trace_json_line(const decision::EpisodeTrace& t, bool with_observations) {
  json steps = json::array();
  for (const auto& s : t.steps) {
    json js = {{"index", s.index}, {"action", to_json(s.record.action)}, {"reward", s.record.reward}, {"score", s.score}};
    if (with_observations) js["obs"] = to_json(s.record.obs);
    steps.push_back(std::move(js));
  }
  const json j = {{"schema", kTraceSchema},
                  {"task_id", t.task_id},
                  {"method", t.method},
                  {"mode", t.mode},
                  {"seed", t.seed},
                  {"repetition", t.repetition},
                  {"threshold", t.threshold},
                  {"max_attempts", t.max_attempts},
                  {"success", t.success},
                  {"error", t.error},
                  {"steps", std::move(steps)}};
  return j.dump();
}

decision::EpisodeTrace parse_trace_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("trace line: ") + e.what());
  }
  if (j.value("schema", "") != kTraceSchema) throw FormatError("trace line: unsupported schema");
  return guarded("trace line", [&] {
    decision::EpisodeTrace t;
    t.task_id = j.at("task_id").get<std::string>();
    t.method = j.at("method").get<std::string>();
    t.mode = j.at("mode").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.repetition = j.at("repetition").get<int>();
    t.threshold = j.at("threshold").get<double>();
    t.max_attempts = j.at("max_attempts").get<std::size_t>();
    t.success = j.at("success").get<bool>();
    t.error = j.at("error").get<std::string>();
    for (const auto& s : j.at("steps")) {
      decision::Step st;
      st.index = s.at("index").get<std::size_t>();
      st.record.action = action_from(s.at("action"));
      st.record.reward = s.at("reward").get<double>();
      st.score = s.at("score").get<double>();
      if (s.contains("obs")) st.record.obs = observation_from(s.at("obs"));
      t.steps.push_back(std::move(st));
    }
    return t;
  });
}

std::vector<decision::EpisodeTrace> load_traces(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<decision::EpisodeTrace> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_trace_line(line));
  return out;
}

}  // namespace kcmd::io
