#pragma once

// Task-to-task distances: debiased entropic optimal transport between the
// empirical sample distributions of two offline datasets.

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "kcmd/scoop.hpp"

namespace kcmd::ot {

struct SampleCostParams {
  double c_img = 1.0;     // largest histogram-feature norm
  double c_action = 1.0;  // largest action-vector norm
  double c_reward = 1.0;  // largest reward magnitude
  std::size_t bins = 32;
  // Histogram range per observation channel.
  std::vector<std::pair<double, double>> ranges;

  void validate() const;
  // Ranges and normalization constants over a whole database.
  static SampleCostParams fit(std::span<const TaskDataset> tasks, std::size_t bins = 32);
};

// Per-channel density histograms concatenated; each channel sums to 1.
std::vector<double> histogram_feature(const Observation& obs, const SampleCostParams& p);

// [x, y, yaw in radians, depth, stiffness].
std::array<double, 5> action_vector(const ScoopAction& a);

struct Sample {
  std::vector<double> hist;
  std::array<double, 5> action{};
  double reward = 0.0;
};

Sample make_sample(const Record& r, const SampleCostParams& p);
std::vector<Sample> make_samples(const TaskDataset& d, const SampleCostParams& p);

double sample_cost(const Sample& a, const Sample& b, const SampleCostParams& p);
double sample_cost(const Record& a, const Record& b, const SampleCostParams& p);

struct SinkhornOptions {
  double eps_scale = 0.05;  // eps = eps_scale * median cross cost, unless eps > 0
  double eps = 0.0;
  int max_iter = 500;
  double tol = 1e-6;
};

struct OtResult {
  double value = 0.0;  // dual objective <a, f> + <b, g>
  int iterations = 0;
  double marginal_error = 0.0;
  bool converged = false;
};

// Entropic OT with uniform weights on a rows x cols cost matrix (row-major).
OtResult entropic_ot(std::span<const double> cost, std::size_t rows, std::size_t cols, double eps, int max_iter,
                     double tol);

struct Divergence {
  double value = 0.0;
  double eps = 0.0;
  bool converged = true;
};

Divergence sinkhorn_divergence(std::span<const Sample> a, std::span<const Sample> b, const SampleCostParams& p,
                               const SinkhornOptions& opts = {});
Divergence sinkhorn_divergence(const TaskDataset& a, const TaskDataset& b, const SampleCostParams& p,
                               const SinkhornOptions& opts = {});

struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // n x n, row-major
  bool all_converged = true;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  std::vector<double> row(std::size_t i) const;
};

DistanceMatrix distance_matrix(std::span<const TaskDataset> tasks, const SampleCostParams& p,
                               const SinkhornOptions& opts = {});

struct Split {
  std::vector<std::size_t> mean;    // similar to the reference, reference included
  std::vector<std::size_t> kernel;  // the rest
  bool fallback = false;            // degenerate distances, split by index instead
};

// Tasks at distance <= median (over all tasks, reference included) form the
// mean split.
Split median_split(std::span<const double> dist_to_ref, std::size_t ref);
// The ceil(M/2) closest tasks (ties by index) form the mean split.
Split count_split(std::span<const double> dist_to_ref, std::size_t ref);

}  // namespace kcmd::ot
