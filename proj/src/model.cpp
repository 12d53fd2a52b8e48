#include "kcmd/model.hpp"

#include <cmath>
#include <random>

#include "kcmd/error.hpp"

namespace kcmd::model {

void Architecture::validate() const {
  if (channels < 2 || patch_height == 0 || patch_width == 0) throw ConfigError("architecture: bad patch geometry");
  if (embedding_dim == 0) throw ConfigError("architecture: embedding_dim must be positive");
  for (auto w : extractor)
    if (w == 0) throw ConfigError("architecture: zero-width extractor layer");
  for (auto w : mean_hidden)
    if (w == 0) throw ConfigError("architecture: zero-width mean layer");
  for (auto w : kernel_hidden)
    if (w == 0) throw ConfigError("architecture: zero-width kernel layer");
  if (!(height_scale > 0.0)) throw ConfigError("architecture: height_scale must be positive");
}

ad::Tensor Mlp::forward(ad::Tape& tape, const ad::Tensor& x) const {
  ad::Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = tape.add_bias(tape.matmul(h, layers[i].weight), layers[i].bias);
    if (i + 1 < layers.size() || relu_on_output) h = tape.relu(h);
  }
  return h;
}

std::vector<ad::Tensor> Mlp::parameters() const {
  std::vector<ad::Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

Mlp Mlp::clone() const {
  Mlp m;
  m.relu_on_output = relu_on_output;
  for (const auto& l : layers) m.layers.push_back({l.weight.clone(), l.bias.clone()});
  return m;
}

RewardNormalizer RewardNormalizer::fit(std::span<const TaskDataset> tasks) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& t : tasks)
    for (const auto& r : t.records) {
      sum += r.reward;
      sq += r.reward * r.reward;
      ++n;
    }
  if (n == 0) throw ConfigError("cannot fit reward normalization on an empty database");
  RewardNormalizer rn;
  rn.mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - rn.mean * rn.mean, 0.0);
  rn.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
  return rn;
}

Mlp DeepGPModel::make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                          bool relu_on_output, bool zero_last, std::uint64_t seed, const std::string& prefix) {
  std::mt19937_64 rng(seed);
  Mlp mlp;
  mlp.relu_on_output = relu_on_output;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(out);
  std::size_t fan_in = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t fan_out = widths[i];
    const bool last = i + 1 == widths.size();
    const bool relu_follows = !last || relu_on_output;
    const double bound = relu_follows ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                      : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(fan_in * fan_out, 0.0);
    if (!(last && zero_last))
      for (double& v : w) v = u(rng);
    DenseLayer layer;
    layer.weight = ad::Tensor::from({fan_in, fan_out}, std::move(w), true);
    layer.weight.named(prefix + "." + std::to_string(i) + ".weight");
    layer.bias = ad::Tensor::zeros({fan_out}, true);
    layer.bias.named(prefix + "." + std::to_string(i) + ".bias");
    mlp.layers.push_back(std::move(layer));
    fan_in = fan_out;
  }
  return mlp;
}

DeepGPModel DeepGPModel::create(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  std::seed_seq seq{seed, std::uint64_t{0x6b636d64}};
  std::vector<std::uint64_t> seeds(3);
  seq.generate(seeds.begin(), seeds.end());
  DeepGPModel m;
  m.arch = arch;
  std::vector<std::size_t> ext_hidden = arch.extractor;
  std::size_t ext_out = ext_hidden.empty() ? 0 : ext_hidden.back();
  if (!ext_hidden.empty()) ext_hidden.pop_back();
  if (ext_out > 0) m.extractor = make_mlp(arch.input_dim(), ext_hidden, ext_out, true, false, seeds[0], "extractor");
  m.mean_head = make_mlp(arch.feature_dim(), arch.mean_hidden, 1, false, true, seeds[1], "mean");
  m.kernel_head = make_mlp(arch.feature_dim(), arch.kernel_hidden, arch.embedding_dim, false, false, seeds[2], "kernel");
  m.kernel = gp::KernelHyper::from(gp::KernelParams{}, true);
  return m;
}

DeepGPModel DeepGPModel::clone() const {
  DeepGPModel m;
  m.arch = arch;
  m.extractor = extractor.clone();
  m.mean_head = mean_head.clone();
  m.kernel_head = kernel_head.clone();
  m.kernel.log_lengthscale = kernel.log_lengthscale.clone();
  m.kernel.log_outputscale = kernel.log_outputscale.clone();
  m.kernel.log_noise = kernel.log_noise.clone();
  m.normalizer = normalizer;
  m.has_kernel = has_kernel;
  m.method = method;
  return m;
}

std::vector<ad::Tensor> DeepGPModel::all_parameters() const {
  std::vector<ad::Tensor> out = extractor.parameters();
  for (auto& t : mean_head.parameters()) out.push_back(t);
  for (auto& t : kernel_head.parameters()) out.push_back(t);
  for (auto& t : kernel.tensors()) out.push_back(t);
  return out;
}

std::vector<double> input_vector(const Architecture& arch, const Observation& obs, const ScoopAction& act) {
  if (obs.channels != arch.channels || obs.height != arch.patch_height || obs.width != arch.patch_width ||
      obs.data.size() != arch.channels * arch.patch_height * arch.patch_width) {
    throw DimensionError("observation shape does not match the architecture descriptor");
  }
  std::vector<double> v(arch.input_dim());
  const std::size_t plane = obs.height * obs.width;
  const std::size_t hc = obs.channels - 1;
  double hmean = 0.0;
  for (std::size_t i = 0; i < plane; ++i) hmean += obs.data[hc * plane + i];
  hmean /= static_cast<double>(plane);
  for (std::size_t i = 0; i < hc * plane; ++i) v[i] = obs.data[i];
  for (std::size_t i = 0; i < plane; ++i) v[hc * plane + i] = (obs.data[hc * plane + i] - hmean) * arch.height_scale;
  v[arch.input_dim() - 2] = (act.depth - kMinDepth) / (kMaxDepth - kMinDepth);
  v[arch.input_dim() - 1] = act.stiffness == Stiffness::hard ? 1.0 : 0.0;
  return v;
}

ad::Tensor input_batch(const Architecture& arch, std::span<const Query> queries) {
  const std::size_t d = arch.input_dim();
  std::vector<double> data(queries.size() * d);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto v = input_vector(arch, *queries[i].obs, *queries[i].action);
    std::copy(v.begin(), v.end(), data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return ad::Tensor::from({queries.size(), d}, std::move(data));
}

ad::Tensor input_batch(const Architecture& arch, std::span<const Record> records) {
  std::vector<Query> q;
  q.reserve(records.size());
  for (const auto& r : records) q.push_back({&r.obs, &r.action});
  return input_batch(arch, q);
}

ad::Tensor features(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& inputs) {
  if (m.extractor.layers.empty()) return inputs;
  return m.extractor.forward(tape, inputs);
}

ad::Tensor mean_column(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& feats) {
  return tape.column(m.mean_head.forward(tape, feats), 0);
}

ad::Tensor embeddings(ad::Tape& tape, const DeepGPModel& m, const ad::Tensor& feats) {
  return m.kernel_head.forward(tape, feats);
}

namespace {

struct Forward {
  std::vector<double> mean;  // standardized
  gp::Matrix embed;
};

Forward forward_values(const DeepGPModel& m, const ad::Tensor& inputs, bool with_embed) {
  ad::Tape tape;
  tape.set_recording(false);
  const ad::Tensor f = features(tape, m, inputs);
  Forward out;
  const ad::Tensor mu = mean_column(tape, m, f);
  out.mean.assign(mu.data().begin(), mu.data().end());
  if (with_embed) {
    const ad::Tensor z = embeddings(tape, m, f);
    out.embed = Eigen::Map<const gp::Matrix>(z.data().data(), static_cast<Eigen::Index>(z.shape()[0]),
                                             static_cast<Eigen::Index>(z.shape()[1]));
  }
  return out;
}

}  // namespace

std::vector<double> extract_features(const DeepGPModel& m, const Observation& obs, const ScoopAction& act) {
  const Query q{&obs, &act};
  ad::Tape tape;
  tape.set_recording(false);
  const ad::Tensor f = features(tape, m, input_batch(m.arch, std::span<const Query>(&q, 1)));
  return {f.data().begin(), f.data().end()};
}

std::vector<double> predict_mean_batch(const DeepGPModel& m, std::span<const Query> queries) {
  if (queries.empty()) return {};
  auto fw = forward_values(m, input_batch(m.arch, queries), false);
  for (double& v : fw.mean) v = m.normalizer.destandardize(v);
  return fw.mean;
}

double predict_mean(const DeepGPModel& m, const Observation& obs, const ScoopAction& act) {
  const Query q{&obs, &act};
  return predict_mean_batch(m, std::span<const Query>(&q, 1)).front();
}

std::vector<gp::GPPosterior> predict_batch(const DeepGPModel& m, std::span<const Query> queries,
                                           std::span<const Record> support) {
  std::vector<gp::GPPosterior> out(queries.size());
  if (queries.empty()) return out;
  const double sd = m.normalizer.stddev;
  if (!m.has_kernel) {
    const auto means = predict_mean_batch(m, queries);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {means[i], 0.0};
    return out;
  }
  const Forward q = forward_values(m, input_batch(m.arch, queries), true);
  gp::Matrix sz(0, static_cast<Eigen::Index>(m.arch.embedding_dim));
  std::vector<double> residuals;
  if (!support.empty()) {
    const Forward s = forward_values(m, input_batch(m.arch, support), true);
    sz = s.embed;
    residuals.resize(support.size());
    for (std::size_t i = 0; i < support.size(); ++i)
      residuals[i] = m.normalizer.standardize(support[i].reward) - s.mean[i];
  }
  const auto post = gp::posterior_batch(sz, residuals, q.embed, m.kernel.values());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].mean = m.normalizer.destandardize(q.mean[i] + post[i].mean);
    out[i].variance = post[i].variance * sd * sd;
  }
  return out;
}

gp::GPPosterior predict(const DeepGPModel& m, const Observation& obs, const ScoopAction& act,
                        std::span<const Record> support) {
  const Query q{&obs, &act};
  return predict_batch(m, std::span<const Query>(&q, 1), support).front();
}

}  // namespace kcmd::model
