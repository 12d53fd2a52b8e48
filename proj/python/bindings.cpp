#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kcmd/bench.hpp"
#include "kcmd/error.hpp"
#include "kcmd/gp.hpp"
#include "kcmd/io.hpp"
#include "kcmd/terrain.hpp"

namespace py = pybind11;
using namespace kcmd;

namespace {

py::dict trace_dict(const decision::EpisodeTrace& t) {
  py::list steps;
  for (const auto& s : t.steps) {
    py::dict d;
    d["index"] = s.index;
    d["reward"] = s.record.reward;
    d["score"] = s.score;
    d["depth"] = s.record.action.depth;
    d["yaw"] = s.record.action.yaw;
    steps.append(d);
  }
  py::dict d;
  d["task_id"] = t.task_id;
  d["method"] = t.method;
  d["threshold"] = t.threshold;
  d["success"] = t.success;
  d["attempts"] = t.attempts();
  d["scored_attempts"] = t.scored_attempts();
  d["steps"] = steps;
  return d;
}

gp::Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  gp::Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw DimensionError("support points must share one dimension");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Scooping reward models with calibrated deep kernels";

  static py::exception<Error> base(m, "KcmdError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const FormatError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  m.def("compute_threshold", [](const std::vector<double>& r) { return sim::compute_threshold(r); },
        "Fifth-largest reward of a set (the success threshold).");

  m.def(
      "gp_posterior",
      [](const std::vector<std::vector<double>>& z, const std::vector<double>& y, const std::vector<double>& q,
         double lengthscale, double outputscale, double noise) {
        const auto kp = gp::KernelParams::from_values(lengthscale, outputscale, noise);
        const auto post = gp::posterior(to_matrix(z), y, q, kp);
        return py::make_tuple(post.mean, post.variance);
      },
      py::arg("z"), py::arg("y"), py::arg("query"), py::arg("lengthscale") = 1.0, py::arg("outputscale") = 1.0,
      py::arg("noise") = 0.1, "RBF GP posterior (mean, variance including noise) at one query point.");

  m.def(
      "gen_data",
      [](std::uint64_t seed, const std::filesystem::path& out, std::size_t n_train, std::size_t n_test,
         std::size_t samples, std::size_t reps) {
        const auto meta = bench::gen_data(seed, out, n_train, n_test, samples, reps);
        return py::make_tuple(meta.train_ids, meta.test_ids);
      },
      py::arg("seed"), py::arg("out"), py::arg("n_train") = 12, py::arg("n_test") = 4, py::arg("samples") = 100,
      py::arg("repetitions") = 3);

  m.def(
      "train",
      [](const std::string& method, const std::filesystem::path& data, const std::filesystem::path& out,
         std::uint64_t seed, const std::string& config_json) {
        auto cfg = config_json.empty() ? bench::ExperimentConfig{} : bench::ExperimentConfig::from_json(config_json);
        cfg.train.seed = seed;
        const auto meth = bench::method_from_string(method);
        const auto suite = bench::load_suite(data, meth == bench::Method::kcmd_manual);
        py::gil_scoped_release release;
        const auto r = bench::train_method(meth, suite, cfg.train);
        const auto manifest = io::manifest_json(r.manifest);
        io::write_file(out / "manifest.json", manifest);
        io::save_checkpoint(out / "checkpoint.json", r.model, io::digest(manifest));
        return (out / "checkpoint.json").string();
      },
      py::arg("method"), py::arg("data"), py::arg("out"), py::arg("seed") = 0, py::arg("config_json") = "",
      "Train a model and write checkpoint.json and manifest.json; returns the checkpoint path.");

  m.def(
      "eval_replay",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, std::size_t max_attempts,
         std::uint64_t seed, const std::string& policy) {
        const auto model = io::load_checkpoint(checkpoint);
        const auto suite = bench::load_suite(data);
        const auto pol = policy.empty() ? bench::default_policy(bench::method_from_string(model.method))
                                        : decision::policy_from_string(policy);
        std::vector<decision::EpisodeTrace> traces;
        {
          py::gil_scoped_release release;
          traces = bench::eval_replay(model, model.method, pol, suite, max_attempts, seed);
        }
        py::list out;
        for (const auto& t : traces) out.append(trace_dict(t));
        return out;
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("max_attempts") = 20, py::arg("seed") = 0,
      py::arg("policy") = "");

  m.def(
      "eval_kshot",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, const std::vector<std::size_t>& shots,
         std::size_t query, std::size_t draws, std::uint64_t seed) {
        const auto model = io::load_checkpoint(checkpoint);
        const auto suite = bench::load_suite(data);
        const auto rows = bench::eval_kshot(model, model.method, suite, shots, query, draws, seed);
        py::list out;
        for (const auto& r : rows) out.append(py::make_tuple(r.task_id, r.shots, r.mae));
        return out;
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("shots") = std::vector<std::size_t>{0, 5, 10},
      py::arg("query") = 80, py::arg("draws") = 5, py::arg("seed") = 0);
}
