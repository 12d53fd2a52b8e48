#include "kcmd/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "kcmd/error.hpp"
#include "kcmd/optim.hpp"
#include "kcmd/rng.hpp"

namespace kcmd::train {

std::string to_string(SplitMethod m) {
  switch (m) {
    case SplitMethod::ot: return "ot";
    case SplitMethod::random: return "random";
    case SplitMethod::manual: return "manual";
  }
  return "?";
}

SplitMethod split_method_from_string(const std::string& s) {
  if (s == "ot") return SplitMethod::ot;
  if (s == "random") return SplitMethod::random;
  if (s == "manual") return SplitMethod::manual;
  throw ConfigError("unknown split method '" + s + "'");
}

void TrainConfig::validate(std::size_t n_tasks) const {
  arch.validate();
  if (folds < 2) throw ConfigError("train.folds: K must be at least 2");
  if (n_tasks > 0 && folds > n_tasks)
    throw ConfigError("train.folds: K=" + std::to_string(folds) + " exceeds the " + std::to_string(n_tasks) +
                      " training tasks");
  if (!(lr_mean > 0.0)) throw ConfigError("train.lr_mean must be positive");
  if (!(lr_kernel > 0.0)) throw ConfigError("train.lr_kernel must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("train.validation_fraction must lie in [0, 1)");
  if (!(l2_anchor_coeff >= 0.0)) throw ConfigError("train.l2_anchor_coeff must be nonnegative");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (max_epochs_mean == 0 || max_epochs_kernel == 0) throw ConfigError("train: epoch caps must be positive");
}

std::size_t ResidualDatabase::size() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.residuals.size();
  return n;
}

bool EarlyStopper::update(double loss) {
  const std::size_t epoch = epoch_++;
  if (!any_ || loss < best_) {
    any_ = true;
    best_ = loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

namespace {

// Network inputs for a task's records, unflipped and flipped.
struct InputCache {
  std::size_t n = 0, d = 0;
  std::vector<double> plain, flipped;
  std::vector<double> targets;  // standardized rewards

  const double* row(std::size_t i, bool flip) const { return (flip ? flipped : plain).data() + i * d; }
};

InputCache make_cache(const model::Architecture& arch, const TaskDataset& t, const model::RewardNormalizer& norm,
                      bool with_flips) {
  InputCache c;
  c.n = t.records.size();
  c.d = arch.input_dim();
  c.plain.reserve(c.n * c.d);
  for (const auto& r : t.records) {
    auto v = model::input_vector(arch, r.obs, r.action);
    c.plain.insert(c.plain.end(), v.begin(), v.end());
    c.targets.push_back(norm.standardize(r.reward));
    if (with_flips) {
      auto f = model::input_vector(arch, r.obs.flipped_vertical(), r.action);
      c.flipped.insert(c.flipped.end(), f.begin(), f.end());
    }
  }
  return c;
}

// Small sensor noise on a network input row: +-0.02 on appearance, +-2 mm on
// height (re-centered, so the patch-mean subtraction still holds).
void add_input_noise(const model::Architecture& arch, double* row, std::mt19937_64& rng) {
  const std::size_t plane = arch.patch_height * arch.patch_width;
  const std::size_t app = (arch.channels - 1) * plane;
  std::uniform_real_distribution<double> ua(-0.02, 0.02), uh(-0.002, 0.002);
  for (std::size_t i = 0; i < app; ++i) row[i] += ua(rng);
  std::vector<double> hn(plane);
  double mean = 0.0;
  for (double& v : hn) {
    v = uh(rng);
    mean += v;
  }
  mean /= static_cast<double>(plane);
  for (std::size_t i = 0; i < plane; ++i) row[app + i] += (hn[i] - mean) * arch.height_scale;
}

struct Snapshot {
  std::vector<std::vector<double>> values;

  static Snapshot take(const std::vector<ad::Tensor>& params) {
    Snapshot s;
    for (const auto& p : params) s.values.emplace_back(p.data().begin(), p.data().end());
    return s;
  }
  void restore(std::vector<ad::Tensor>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) std::copy(values[i].begin(), values[i].end(), params[i].mutable_data().begin());
  }
};

std::vector<ad::Tensor> mean_side_parameters(const model::DeepGPModel& m) {
  auto p = m.extractor_parameters();
  for (auto& t : m.mean_parameters()) p.push_back(t);
  return p;
}

std::vector<ad::Tensor> kernel_side_parameters(const model::DeepGPModel& m) {
  auto p = m.kernel_head_parameters();
  for (auto& t : m.kernel.tensors()) p.push_back(t);
  return p;
}

// Median pairwise embedding distance within each block of rows, pooled over
// blocks. Used to start the lengthscale where the RBF kernel has gradient.
void init_lengthscale(model::DeepGPModel& m, const std::vector<std::pair<std::size_t, std::vector<double>>>& blocks) {
  std::vector<double> dist;
  for (const auto& [n, feats] : blocks) {
    if (n < 2) continue;
    ad::Tape tape;
    tape.set_recording(false);
    const auto z = model::embeddings(tape, m, ad::Tensor::from({n, feats.size() / n}, feats));
    const std::size_t k = z.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < k; ++c) d2 += (z.at(i, c) - z.at(j, c)) * (z.at(i, c) - z.at(j, c));
        dist.push_back(std::sqrt(d2));
      }
  }
  if (dist.empty()) return;
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  if (!(*mid > 0.0)) return;
  auto kp = m.kernel.values();
  kp.log_lengthscale = std::log(*mid);
  m.kernel.assign(kp);
}

void check_finite(double loss, const std::string& where, std::size_t epoch) {
  if (!std::isfinite(loss)) throw TrainingError(where + ": loss diverged at epoch " + std::to_string(epoch));
}

double mse_on(const model::DeepGPModel& m, const std::vector<InputCache>& caches,
              const std::vector<std::pair<std::size_t, std::size_t>>& idx) {
  if (idx.empty()) return 0.0;
  const std::size_t d = m.arch.input_dim();
  std::vector<double> x(idx.size() * d), y(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& c = caches[idx[k].first];
    std::copy_n(c.row(idx[k].second, false), d, x.begin() + static_cast<std::ptrdiff_t>(k * d));
    y[k] = c.targets[idx[k].second];
  }
  ad::Tape tape;
  tape.set_recording(false);
  const auto mu = model::mean_column(tape, m, model::features(tape, m, ad::Tensor::from({idx.size(), d}, std::move(x))));
  double s = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) s += (mu.at(k) - y[k]) * (mu.at(k) - y[k]);
  return s / static_cast<double>(idx.size());
}

}  // namespace

LossCurve fit_mean(model::DeepGPModel& m, std::span<const TaskDataset> tasks, const TrainConfig& cfg, std::uint64_t seed,
                   std::span<const ad::Tensor> anchor, double anchor_coeff) {
  std::vector<InputCache> caches;
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    caches.push_back(make_cache(m.arch, tasks[t], m.normalizer, cfg.augment));
    for (std::size_t i = 0; i < tasks[t].records.size(); ++i) all.emplace_back(t, i);
  }
  if (all.empty()) throw TrainingError("mean training: no samples");
  auto ext = m.extractor_parameters();
  if (!anchor.empty()) {
    if (anchor.size() != ext.size()) throw DimensionError("mean training: anchor does not match the extractor");
    for (std::size_t i = 0; i < ext.size(); ++i)
      if (anchor[i].shape() != ext[i].shape()) throw DimensionError("mean training: anchor shape mismatch at " + ext[i].name());
  }

  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::ceil(cfg.validation_fraction * static_cast<double>(all.size())));
  if (n_val >= all.size()) n_val = 0;  // too few samples to hold any out
  std::vector<std::pair<std::size_t, std::size_t>> val(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::pair<std::size_t, std::size_t>> trn(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());

  auto params = mean_side_parameters(m);
  ad::Adam opt(params, cfg.lr_mean);
  EarlyStopper stop(cfg.patience);
  Snapshot best = Snapshot::take(params);
  LossCurve curve;
  const std::size_t d = m.arch.input_dim();
  std::uniform_int_distribution<int> coin(0, 1);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs_mean; ++epoch) {
    std::shuffle(trn.begin(), trn.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < trn.size(); b0 += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, trn.size() - b0);
      std::vector<double> x(nb * d), y(nb);
      for (std::size_t k = 0; k < nb; ++k) {
        const auto [t, i] = trn[b0 + k];
        const bool flip = cfg.augment && coin(rng) == 1;
        double* row = x.data() + k * d;
        std::copy_n(caches[t].row(i, flip), d, row);
        if (cfg.augment) add_input_noise(m.arch, row, rng);
        y[k] = caches[t].targets[i];
      }
      ad::Tape tape;
      const auto mu = model::mean_column(tape, m, model::features(tape, m, ad::Tensor::from({nb, d}, std::move(x))));
      const auto loss = tape.mean(tape.square(tape.sub(mu, ad::Tensor::from({nb}, std::move(y)))));
      check_finite(loss.item(), "mean training", epoch);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      // Proximal step for anchor_coeff * |theta_f - anchor|^2, applied after
      // the Adam update so the penalty strength is not rescaled away by
      // Adam's per-coordinate normalization.
      if (!anchor.empty() && anchor_coeff > 0.0) {
        const double shrink = 1.0 / (1.0 + 2.0 * cfg.lr_mean * anchor_coeff);
        for (std::size_t p = 0; p < ext.size(); ++p) {
          auto w = ext[p].mutable_data();
          const auto a = anchor[p].data();
          for (std::size_t j = 0; j < w.size(); ++j) w[j] = a[j] + (w[j] - a[j]) * shrink;
        }
      }
      loss_sum += loss.item();
      ++batches;
    }
    const double train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    const double val_loss = n_val > 0 ? mse_on(m, caches, val) : mse_on(m, caches, trn);
    check_finite(val_loss, "mean training (validation)", epoch);
    curve.train.push_back(train_loss);
    curve.validation.push_back(val_loss);
    if (stop.update(val_loss)) best = Snapshot::take(params);
    if (stop.should_stop()) break;
  }
  best.restore(params);
  curve.best_epoch = stop.best_epoch();
  return curve;
}

TrainResult train_sl(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
  if (tasks.empty()) throw ConfigError("train_sl: no training tasks");
  cfg.validate(0);
  TrainResult r;
  r.model = model::DeepGPModel::create(cfg.arch, derive_seed(cfg.seed, {1}));
  r.model.normalizer = model::RewardNormalizer::fit(tasks);
  r.manifest.log.push_back({"sl", -1, "supervised mean training started"});
  auto curve = fit_mean(r.model, tasks, cfg, derive_seed(cfg.seed, {2}));
  curve.name = "sl";
  r.manifest.curves.push_back(std::move(curve));
  r.manifest.log.push_back({"sl", -1, "supervised mean training complete"});
  r.model.has_kernel = false;
  r.model.method = "sl";
  r.manifest.method = "sl";
  r.manifest.seed = cfg.seed;
  r.manifest.config = cfg;
  r.manifest.kernel = r.model.kernel.values();
  return r;
}

TrainResult train_dkmt(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
  if (tasks.empty()) throw ConfigError("train_dkmt: no training tasks");
  cfg.validate(0);
  TrainResult r;
  auto& m = r.model;
  m = model::DeepGPModel::create(cfg.arch, derive_seed(cfg.seed, {1}));
  m.normalizer = model::RewardNormalizer::fit(tasks);
  std::vector<InputCache> caches;
  for (const auto& t : tasks) caches.push_back(make_cache(m.arch, t, m.normalizer, cfg.augment));

  auto mean_params = mean_side_parameters(m);
  auto kernel_params = kernel_side_parameters(m);
  ad::Adam opt_mean(mean_params, cfg.lr_mean), opt_kernel(kernel_params, cfg.lr_kernel);
  auto all = mean_params;
  all.insert(all.end(), kernel_params.begin(), kernel_params.end());
  Snapshot best = Snapshot::take(all);
  EarlyStopper stop(cfg.patience);
  LossCurve curve;
  curve.name = "dkmt";
  std::mt19937_64 rng(derive_seed(cfg.seed, {7}));
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t d = m.arch.input_dim();
  {
    std::vector<std::pair<std::size_t, std::vector<double>>> blocks;
    for (const auto& c : caches) {
      if (c.n == 0) continue;
      ad::Tape tape;
      tape.set_recording(false);
      const auto f = model::features(tape, m, ad::Tensor::from({c.n, d}, c.plain));
      blocks.emplace_back(c.n, std::vector<double>(f.data().begin(), f.data().end()));
    }
    init_lengthscale(m, blocks);
  }
  r.manifest.log.push_back({"dkmt", -1, "joint mean and kernel meta-training started"});

  for (std::size_t epoch = 0; epoch < cfg.max_epochs_kernel; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t t : order) {
      const auto& c = caches[t];
      if (c.n == 0) continue;
      std::vector<double> x(c.n * d);
      for (std::size_t i = 0; i < c.n; ++i) {
        double* row = x.data() + i * d;
        std::copy_n(c.row(i, cfg.augment && coin(rng) == 1), d, row);
        if (cfg.augment) add_input_noise(m.arch, row, rng);
      }
      ad::Tape tape;
      const auto f = model::features(tape, m, ad::Tensor::from({c.n, d}, std::move(x)));
      const auto res = tape.sub(ad::Tensor::from({c.n}, c.targets), model::mean_column(tape, m, f));
      ad::Tensor loss;
      try {
        loss = tape.div(gp::nlml(tape, model::embeddings(tape, m, f), res, m.kernel),
                        ad::Tensor::scalar(static_cast<double>(c.n)));
      } catch (const ConditioningError& e) {
        throw ConditioningError("task " + tasks[t].task_id + ": " + e.what());
      }
      check_finite(loss.item(), "dkmt (task " + tasks[t].task_id + ")", epoch);
      opt_mean.zero_grad();
      opt_kernel.zero_grad();
      tape.backward(loss);
      opt_mean.step();
      opt_kernel.step();
      loss_sum += loss.item();
      ++used;
    }
    const double epoch_loss = loss_sum / static_cast<double>(std::max<std::size_t>(used, 1));
    curve.train.push_back(epoch_loss);
    if (stop.update(epoch_loss)) best = Snapshot::take(all);
    if (stop.should_stop()) break;
  }
  best.restore(all);
  curve.best_epoch = stop.best_epoch();
  r.manifest.curves.push_back(std::move(curve));
  r.manifest.log.push_back({"dkmt", -1, "joint meta-training complete"});
  m.has_kernel = true;
  m.method = "dkmt";
  r.manifest.method = "dkmt";
  r.manifest.seed = cfg.seed;
  r.manifest.config = cfg;
  r.manifest.kernel = m.kernel.values();
  return r;
}

// --- splits ------------------------------------------------------------------

namespace {

struct Objective {
  std::size_t overlap, imbalance;
  auto operator<=>(const Objective&) const = default;
};

std::size_t imbalance_of(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

ManualPartition greedy_manual(const std::vector<std::uint64_t>& masks, std::size_t ref) {
  const std::size_t n = masks.size();
  std::vector<bool> in_mean(n, false);
  in_mean[ref] = true;
  auto eval = [&](const std::vector<bool>& side) {
    std::uint64_t a = 0, b = 0;
    std::size_t na = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (side[i]) {
        a |= masks[i];
        ++na;
      } else {
        b |= masks[i];
      }
    }
    return Objective{static_cast<std::size_t>(std::popcount(a & b)), imbalance_of(na, n - na)};
  };
  Objective cur = eval(in_mean);
  for (bool improved = true; improved;) {
    improved = false;
    std::size_t best_i = n;
    Objective best = cur;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == ref) continue;
      in_mean[i] = !in_mean[i];
      std::size_t nm = static_cast<std::size_t>(std::count(in_mean.begin(), in_mean.end(), true));
      if (nm < n) {
        const Objective o = eval(in_mean);
        if (o < best) {
          best = o;
          best_i = i;
        }
      }
      in_mean[i] = !in_mean[i];
    }
    if (best_i < n) {
      in_mean[best_i] = !in_mean[best_i];
      cur = best;
      improved = true;
    }
  }
  ManualPartition p;
  for (std::size_t i = 0; i < n; ++i) (in_mean[i] ? p.mean : p.kernel).push_back(i);
  p.overlap = cur.overlap;
  p.imbalance = cur.imbalance;
  return p;
}

}  // namespace

ManualPartition manual_split(std::span<const std::vector<int>> materials, std::size_t ref, std::uint64_t pick) {
  const std::size_t n = materials.size();
  if (n < 2) throw SplitError("manual split needs at least 2 tasks");
  if (ref >= n) throw SplitError("manual split: reference task out of range");
  std::set<int> distinct;
  for (const auto& m : materials) distinct.insert(m.begin(), m.end());
  if (distinct.size() < 2) throw SplitError("manual split needs at least 2 distinct materials");
  if (distinct.size() > 64) throw SplitError("manual split supports at most 64 distinct materials");
  std::vector<int> ids(distinct.begin(), distinct.end());
  std::vector<std::uint64_t> masks(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (int m : materials[i])
      masks[i] |= std::uint64_t{1} << (std::lower_bound(ids.begin(), ids.end(), m) - ids.begin());

  if (n > 20) return greedy_manual(masks, ref);

  // Exact: enumerate subsets of the non-reference tasks joining the mean side.
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < n; ++i)
    if (i != ref) others.push_back(i);
  const std::size_t k = others.size();
  const std::uint32_t full = (std::uint32_t{1} << k) - 1;
  std::vector<std::uint64_t> or_mask(std::size_t{1} << k, 0);
  for (std::uint32_t s = 1; s <= full; ++s) {
    const int low = std::countr_zero(s);
    or_mask[s] = or_mask[s & (s - 1)] | masks[others[static_cast<std::size_t>(low)]];
  }
  Objective best{~std::size_t{0}, ~std::size_t{0}};
  std::vector<std::uint32_t> ties;
  for (std::uint32_t s = 0; s < full; ++s) {  // s == full leaves the kernel side empty
    const std::uint64_t a = or_mask[s] | masks[ref], b = or_mask[full ^ s];
    const std::size_t na = 1 + static_cast<std::size_t>(std::popcount(s));
    const Objective o{static_cast<std::size_t>(std::popcount(a & b)), imbalance_of(na, n - na)};
    if (o < best) {
      best = o;
      ties.clear();
    }
    if (o == best) ties.push_back(s);
  }
  const std::uint32_t chosen = ties[pick % ties.size()];
  ManualPartition p;
  p.mean.push_back(ref);
  for (std::size_t j = 0; j < k; ++j) ((chosen >> j) & 1U ? p.mean : p.kernel).push_back(others[j]);
  std::sort(p.mean.begin(), p.mean.end());
  p.overlap = best.overlap;
  p.imbalance = best.imbalance;
  return p;
}

std::vector<SplitPlan> plan_splits(std::span<const TaskDataset> tasks, const TrainConfig& cfg, const KcmdInputs& in,
                                   std::optional<ot::DistanceMatrix>* distances_out) {
  const std::size_t m = tasks.size();
  cfg.validate(m);
  if (m < 2) throw SplitError("kCMD needs at least 2 training tasks");
  std::mt19937_64 rng(derive_seed(cfg.seed, {5}));
  std::vector<std::size_t> refs(m);
  std::iota(refs.begin(), refs.end(), 0);
  std::shuffle(refs.begin(), refs.end(), rng);
  refs.resize(cfg.folds);

  std::optional<ot::DistanceMatrix> dist;
  if (in.method == SplitMethod::ot) {
    if (in.distances) {
      if (in.distances->n != m) throw DimensionError("distance matrix size does not match the task count");
      dist = *in.distances;
    } else {
      const auto p = ot::SampleCostParams::fit(tasks);
      dist = ot::distance_matrix(tasks, p, cfg.sinkhorn);
    }
  }
  if (in.method == SplitMethod::manual && in.materials.size() != m)
    throw SplitError("manual split needs material ids for every training task");

  std::vector<SplitPlan> plans;
  for (std::size_t k = 0; k < cfg.folds; ++k) {
    SplitPlan plan;
    plan.fold = k;
    plan.ref_task = refs[k];
    plan.method = in.method;
    try {
      switch (in.method) {
        case SplitMethod::ot: {
          const auto row = dist->row(refs[k]);
          const auto s = cfg.count_split ? ot::count_split(row, refs[k]) : ot::median_split(row, refs[k]);
          plan.mean_tasks = s.mean;
          plan.kernel_tasks = s.kernel;
          plan.fallback = s.fallback;
          break;
        }
        case SplitMethod::random: {
          std::mt19937_64 frng(derive_seed(cfg.seed, {6, k}));
          std::vector<std::size_t> others;
          for (std::size_t i = 0; i < m; ++i)
            if (i != refs[k]) others.push_back(i);
          std::shuffle(others.begin(), others.end(), frng);
          const std::size_t n_mean = (m + 1) / 2;
          plan.mean_tasks.push_back(refs[k]);
          for (std::size_t i = 0; i < others.size(); ++i)
            (plan.mean_tasks.size() < n_mean ? plan.mean_tasks : plan.kernel_tasks).push_back(others[i]);
          std::sort(plan.mean_tasks.begin(), plan.mean_tasks.end());
          std::sort(plan.kernel_tasks.begin(), plan.kernel_tasks.end());
          break;
        }
        case SplitMethod::manual: {
          const auto p = manual_split(in.materials, refs[k], derive_seed(cfg.seed, {6, k}));
          plan.mean_tasks = p.mean;
          plan.kernel_tasks = p.kernel;
          plan.overlap = p.overlap;
          break;
        }
      }
    } catch (const SplitError& e) {
      throw SplitError("fold " + std::to_string(k) + ": " + e.what());
    }
    plans.push_back(std::move(plan));
  }
  if (distances_out) *distances_out = std::move(dist);
  return plans;
}

// --- kCMD ----------------------------------------------------------------------

namespace {

// Frozen fold-extractor features of one kernel-split task, both orientations.
struct FoldFeatures {
  std::size_t n = 0, d = 0;
  std::vector<double> plain, flipped;
  std::vector<double> res_plain, res_flipped;
};

void fold_features(const model::DeepGPModel& fm, const InputCache& c, bool with_flips, FoldFeatures& out) {
  auto run = [&](bool flip, std::vector<double>& feats, std::vector<double>& res) {
    ad::Tape tape;
    tape.set_recording(false);
    const auto f = model::features(tape, fm, ad::Tensor::from({c.n, c.d}, flip ? c.flipped : c.plain));
    const auto mu = model::mean_column(tape, fm, f);
    feats.assign(f.data().begin(), f.data().end());
    res.resize(c.n);
    for (std::size_t i = 0; i < c.n; ++i) res[i] = c.targets[i] - mu.at(i);
    out.d = f.cols();
  };
  out.n = c.n;
  run(false, out.plain, out.res_plain);
  if (with_flips) run(true, out.flipped, out.res_flipped);
}

}  // namespace

TrainResult train_kcmd(std::span<const TaskDataset> tasks, const TrainConfig& cfg, const KcmdInputs& in) {
  const std::size_t m = tasks.size();
  if (m < 2) throw ConfigError("train_kcmd needs at least 2 training tasks");
  cfg.validate(m);
  TrainResult r;
  auto& man = r.manifest;
  man.method = "kcmd-" + to_string(in.method);
  man.seed = cfg.seed;
  man.config = cfg;

  // (1) supervised extractor and mean on every task.
  model::DeepGPModel sl;
  if (in.sl_model) {
    if (!(in.sl_model->arch == cfg.arch)) throw ConfigError("kCMD: supplied SL model has a different architecture");
    sl = in.sl_model->clone();
    man.log.push_back({"sl", -1, "supervised phase loaded from the supplied SL model"});
  } else {
    auto slr = train_sl(tasks, cfg);
    sl = std::move(slr.model);
    for (auto& c : slr.manifest.curves) man.curves.push_back(std::move(c));
    man.log.push_back({"sl", -1, "supervised phase complete"});
  }

  // (2) per fold: split, train a fold mean from scratch, collect residuals.
  man.splits = plan_splits(tasks, cfg, in, &man.distances);
  const auto anchor = sl.extractor_parameters();
  std::vector<InputCache> caches;
  for (const auto& t : tasks) caches.push_back(make_cache(cfg.arch, t, sl.normalizer, cfg.augment));
  ResidualDatabase db;
  std::vector<FoldFeatures> feats;
  for (const auto& plan : man.splits) {
    const int fold = static_cast<int>(plan.fold);
    man.log.push_back({"fold", fold, "fold started, reference task " + tasks[plan.ref_task].task_id});
    auto fm = model::DeepGPModel::create(cfg.arch, derive_seed(cfg.seed, {3, plan.fold}));
    fm.normalizer = sl.normalizer;
    std::vector<TaskDataset> mean_tasks;
    for (std::size_t t : plan.mean_tasks) mean_tasks.push_back(tasks[t]);
    LossCurve curve;
    try {
      curve = fit_mean(fm, mean_tasks, cfg, derive_seed(cfg.seed, {4, plan.fold}), anchor, cfg.l2_anchor_coeff);
    } catch (const Error& e) {
      throw TrainingError("fold " + std::to_string(plan.fold) + ": " + e.what());
    }
    curve.name = "fold-" + std::to_string(plan.fold);
    man.curves.push_back(std::move(curve));

    double drift = 0.0;
    const auto fext = fm.extractor_parameters();
    for (std::size_t p = 0; p < fext.size(); ++p)
      for (std::size_t j = 0; j < fext[p].size(); ++j) drift = std::max(drift, std::abs(fext[p].at(j) - anchor[p].at(j)));
    man.fold_drift.push_back(drift);

    for (std::size_t t : plan.kernel_tasks) {
      FoldFeatures ff;
      fold_features(fm, caches[t], cfg.augment, ff);
      ResidualEntry e;
      e.fold = plan.fold;
      e.task = t;
      e.samples.resize(ff.n);
      std::iota(e.samples.begin(), e.samples.end(), 0);
      e.residuals = ff.res_plain;
      db.entries.push_back(std::move(e));
      feats.push_back(std::move(ff));
    }
    man.log.push_back({"fold", fold, "fold complete, " + std::to_string(plan.kernel_tasks.size()) +
                                         " kernel tasks collected"});
  }
  man.residual_count = db.size();

  // (3) one kernel head and one set of hyperparameters over every fold's
  // residuals, each fold embedded through its own frozen extractor.
  r.model = sl.clone();
  auto& km = r.model;
  {
    std::vector<std::pair<std::size_t, std::vector<double>>> blocks;
    for (const auto& ff : feats) blocks.emplace_back(ff.n, ff.plain);
    init_lengthscale(km, blocks);
  }
  auto kparams = kernel_side_parameters(km);
  ad::Adam opt(kparams, cfg.lr_kernel);
  EarlyStopper stop(cfg.patience);
  Snapshot best = Snapshot::take(kparams);
  LossCurve kcurve;
  kcurve.name = "kernel";
  std::mt19937_64 rng(derive_seed(cfg.seed, {8}));
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<std::size_t> order(db.entries.size());
  std::iota(order.begin(), order.end(), 0);
  man.log.push_back({"kernel", -1, "kernel meta-training started on " + std::to_string(db.size()) + " residuals"});
  for (std::size_t epoch = 0; epoch < cfg.max_epochs_kernel && !order.empty(); ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t e : order) {
      const auto& ff = feats[e];
      std::vector<double> x(ff.n * ff.d), y(ff.n);
      for (std::size_t i = 0; i < ff.n; ++i) {
        const bool flip = cfg.augment && coin(rng) == 1;
        const auto& src = flip ? ff.flipped : ff.plain;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * ff.d), ff.d, x.begin() + static_cast<std::ptrdiff_t>(i * ff.d));
        y[i] = flip ? ff.res_flipped[i] : ff.res_plain[i];
      }
      ad::Tape tape;
      const auto z = model::embeddings(tape, km, ad::Tensor::from({ff.n, ff.d}, std::move(x)));
      ad::Tensor loss;
      try {
        loss = tape.div(gp::nlml(tape, z, ad::Tensor::from({ff.n}, std::move(y)), km.kernel),
                        ad::Tensor::scalar(static_cast<double>(ff.n)));
      } catch (const ConditioningError& err) {
        throw ConditioningError("fold " + std::to_string(db.entries[e].fold) + ", task " +
                                tasks[db.entries[e].task].task_id + ": " + err.what());
      }
      check_finite(loss.item(), "kernel meta-training (fold " + std::to_string(db.entries[e].fold) + ")", epoch);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += loss.item();
    }
    (void)loss_sum;
    double epoch_loss = 0.0;
    for (const auto& ff : feats) {
      ad::Tape tape;
      tape.set_recording(false);
      const auto z = model::embeddings(tape, km, ad::Tensor::from({ff.n, ff.d}, ff.plain));
      epoch_loss += gp::nlml(tape, z, ad::Tensor::from({ff.n}, ff.res_plain), km.kernel).item() / static_cast<double>(ff.n);
    }
    epoch_loss /= static_cast<double>(feats.size());
    kcurve.train.push_back(epoch_loss);
    if (stop.update(epoch_loss)) best = Snapshot::take(kparams);
    if (stop.should_stop()) break;
  }
  best.restore(kparams);
  kcurve.best_epoch = stop.best_epoch();
  man.curves.push_back(std::move(kcurve));
  man.log.push_back({"kernel", -1, "kernel meta-training complete"});

  // (4) extractor and mean are the phase-1 weights; fold models are dropped.
  km.has_kernel = true;
  km.method = man.method;
  man.kernel = km.kernel.values();
  return r;
}

}  // namespace kcmd::train
