#pragma once

// Deep GP reward model: a shared feature extractor feeding a deep mean head
// and a deep kernel head whose output is the GP embedding.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kcmd/gp.hpp"
#include "kcmd/scoop.hpp"
#include "kcmd/tensor.hpp"

namespace kcmd::model {

struct Architecture {
  std::size_t channels = 4;
  std::size_t patch_height = 16;
  std::size_t patch_width = 16;
  std::vector<std::size_t> extractor{64, 64};
  std::vector<std::size_t> mean_hidden{32};
  std::vector<std::size_t> kernel_hidden{32};
  std::size_t embedding_dim = 16;
  // Height channel enters as (h - mean_h) * height_scale.
  double height_scale = 20.0;

  std::size_t input_dim() const { return channels * patch_height * patch_width + 2; }
  std::size_t feature_dim() const { return extractor.empty() ? input_dim() : extractor.back(); }
  void validate() const;

  bool operator==(const Architecture&) const = default;
};

struct DenseLayer {
  ad::Tensor weight;  // in x out
  ad::Tensor bias;    // out
};

struct Mlp {
  std::vector<DenseLayer> layers;
  bool relu_on_output = false;

  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x) const;
  std::vector<ad::Tensor> parameters() const;
  Mlp clone() const;
};

struct RewardNormalizer {
  double mean = 0.0;
  double stddev = 1.0;

  double standardize(double r) const { return (r - mean) / stddev; }
  double destandardize(double z) const { return z * stddev + mean; }
  static RewardNormalizer fit(std::span<const TaskDataset> tasks);
};

class DeepGPModel {
 public:
  Architecture arch;
  Mlp extractor;
  Mlp mean_head;
  Mlp kernel_head;
  gp::KernelHyper kernel;
  RewardNormalizer normalizer;
  bool has_kernel = true;  // false for the supervised-only baseline
  std::string method = "untrained";

  // Fresh model: He-uniform hidden layers, zeroed final mean layer, default
  // kernel hyperparameters.
  static DeepGPModel create(const Architecture& arch, std::uint64_t seed);
  static Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, bool relu_on_output,
                      bool zero_last, std::uint64_t seed, const std::string& prefix);

  DeepGPModel clone() const;

  std::vector<ad::Tensor> extractor_parameters() const { return extractor.parameters(); }
  std::vector<ad::Tensor> mean_parameters() const { return mean_head.parameters(); }
  std::vector<ad::Tensor> kernel_head_parameters() const { return kernel_head.parameters(); }
  // Every trainable tensor, names included, in a fixed order.
  std::vector<ad::Tensor> all_parameters() const;
};

// Raw network input for one (observation, action): flattened patch followed
// by normalized depth and stiffness in {0, 1}. x, y and yaw enter only
// through the patch.
std::vector<double> input_vector(const Architecture& arch, const Observation& obs, const ScoopAction& act);

struct Query {
  const Observation* obs;
  const ScoopAction* action;
};

ad::Tensor input_batch(const Architecture& arch, std::span<const Query> queries);
ad::Tensor input_batch(const Architecture& arch, std::span<const Record> records);

// Tape-level pieces used by training.
ad::Tensor features(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& inputs);
ad::Tensor mean_column(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& feats);  // N, standardized
ad::Tensor embeddings(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& feats);   // N x embedding_dim

// --- inference -------------------------------------------------------------

std::vector<double> extract_features(const DeepGPModel& m, const Observation& obs, const ScoopAction& act);
double predict_mean(const DeepGPModel& m, const Observation& obs, const ScoopAction& act);
std::vector<double> predict_mean_batch(const DeepGPModel& m, std::span<const Query> queries);

// Posterior in reward units (cm^3, cm^6). Models without a kernel ignore
// the support set and report zero variance.
gp::GPPosterior predict(const DeepGPModel& m, const Observation& obs, const ScoopAction& act,
                        std::span<const Record> support);
std::vector<gp::GPPosterior> predict_batch(const DeepGPModel& m, std::span<const Query> queries,
                                           std::span<const Record> support);

}  // namespace kcmd::model
