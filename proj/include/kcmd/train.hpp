#pragma once

// Training procedures: supervised mean training (SL), joint mean and kernel
// meta-training on all tasks (DKMT), and K-fold mean/kernel split training
// (kCMD) with OT, random or material-based splits.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kcmd/model.hpp"
#include "kcmd/ot.hpp"
#include "kcmd/scoop.hpp"

namespace kcmd::train {

enum class SplitMethod { ot, random, manual };

std::string to_string(SplitMethod m);
SplitMethod split_method_from_string(const std::string& s);

struct TrainConfig {
  model::Architecture arch;
  std::size_t folds = 10;  // K
  double lr_mean = 5e-3;
  double lr_kernel = 1e-2;
  std::size_t patience = 5;
  double validation_fraction = 0.1;
  double l2_anchor_coeff = 1.0;
  std::size_t batch_size = 32;       // mean training mini-batch
  std::size_t max_epochs_mean = 60;
  std::size_t max_epochs_kernel = 200;
  bool augment = true;               // vertical flips plus small sensor noise
  bool count_split = false;          // OT split by count instead of median
  ot::SinkhornOptions sinkhorn;
  std::uint64_t seed = 0;

  void validate(std::size_t n_tasks) const;
};

struct SplitPlan {
  std::size_t fold = 0;
  std::size_t ref_task = 0;
  std::vector<std::size_t> mean_tasks;
  std::vector<std::size_t> kernel_tasks;
  SplitMethod method = SplitMethod::ot;
  bool fallback = false;        // degenerate OT distances, split by index
  std::size_t overlap = 0;      // manual: materials shared by both sides
};

// Residuals of one fold's mean model on one kernel-split task.
struct ResidualEntry {
  std::size_t fold = 0;
  std::size_t task = 0;
  std::vector<std::size_t> samples;  // record indices within the task
  std::vector<double> residuals;     // standardized reward minus fold mean
};

struct ResidualDatabase {
  std::vector<ResidualEntry> entries;
  std::size_t size() const;
};

struct LogEvent {
  std::string phase;  // "sl", "fold", "kernel", "dkmt"
  int fold = -1;
  std::string message;
};

struct LossCurve {
  std::string name;
  std::vector<double> train;
  std::vector<double> validation;
  std::size_t best_epoch = 0;
};

struct Manifest {
  std::string method;
  std::uint64_t seed = 0;
  TrainConfig config;
  std::vector<SplitPlan> splits;
  std::vector<LossCurve> curves;
  std::vector<LogEvent> log;
  std::size_t residual_count = 0;
  gp::KernelParams kernel;
  std::vector<double> fold_drift;  // max |theta_f^k - theta_f| per fold
  std::optional<ot::DistanceMatrix> distances;
};

struct TrainResult {
  model::DeepGPModel model;
  Manifest manifest;
};

// Extractor + mean trained with MSE (plus an optional L2 pull towards
// `anchor`) and early stopping on a held-out ceil(fraction * N) samples.
// Weights of the best validation epoch are restored.
LossCurve fit_mean(model::DeepGPModel& m, std::span<const TaskDataset> tasks, const TrainConfig& cfg,
                   std::uint64_t seed, std::span<const ad::Tensor> anchor = {}, double anchor_coeff = 0.0);

TrainResult train_sl(std::span<const TaskDataset> tasks, const TrainConfig& cfg);
TrainResult train_dkmt(std::span<const TaskDataset> tasks, const TrainConfig& cfg);

struct KcmdInputs {
  SplitMethod method = SplitMethod::ot;
  // Ground-truth material ids per task, required by the manual split only.
  std::vector<std::vector<int>> materials;
  // Phase-1 model; trained here when absent.
  const model::DeepGPModel* sl_model = nullptr;
  // Precomputed OT distances between the training tasks.
  const ot::DistanceMatrix* distances = nullptr;
};

TrainResult train_kcmd(std::span<const TaskDataset> tasks, const TrainConfig& cfg, const KcmdInputs& in);

// Lower-level pieces, exposed for inspection and tests.
std::vector<SplitPlan> plan_splits(std::span<const TaskDataset> tasks, const TrainConfig& cfg, const KcmdInputs& in,
                                   std::optional<ot::DistanceMatrix>* distances_out = nullptr);

struct ManualPartition {
  std::vector<std::size_t> mean;
  std::vector<std::size_t> kernel;
  std::size_t overlap = 0;
  std::size_t imbalance = 0;
};

// Partition with `ref` on the mean side minimizing shared materials, then
// size imbalance. Exact for up to 20 tasks, greedy local search beyond.
// `pick` chooses among equally good partitions.
ManualPartition manual_split(std::span<const std::vector<int>> materials, std::size_t ref, std::uint64_t pick = 0);

// Early-stopping bookkeeping shared by every training loop.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
  // Returns true when the new loss is the best so far.
  bool update(double loss);
  bool should_stop() const { return since_best_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  double best_ = 0.0;
  bool any_ = false;
};

}  // namespace kcmd::train
