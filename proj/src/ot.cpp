#include "kcmd/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kcmd/error.hpp"

namespace kcmd::ot {

void SampleCostParams::validate() const {
  if (!(c_img > 0.0 && c_action > 0.0 && c_reward > 0.0)) throw ConfigError("sample cost: C1, C2, C3 must be positive");
  if (bins == 0) throw ConfigError("sample cost: histogram_bins must be positive");
  for (const auto& [lo, hi] : ranges)
    if (!(hi >= lo)) throw ConfigError("sample cost: histogram range with hi < lo");
}

SampleCostParams SampleCostParams::fit(std::span<const TaskDataset> tasks, std::size_t bins) {
  SampleCostParams p;
  p.bins = bins;
  std::size_t channels = 0;
  for (const auto& t : tasks)
    if (!t.records.empty()) {
      channels = t.records.front().obs.channels;
      break;
    }
  if (channels == 0) throw ConfigError("sample cost: empty database");
  p.ranges.assign(channels, {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  double amax = 0.0, rmax = 0.0;
  for (const auto& t : tasks)
    for (const auto& r : t.records) {
      if (r.obs.channels != channels) throw DimensionError("sample cost: mixed channel counts in database");
      const std::size_t plane = r.obs.height * r.obs.width;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = r.obs.data[c * plane + i];
          p.ranges[c].first = std::min(p.ranges[c].first, v);
          p.ranges[c].second = std::max(p.ranges[c].second, v);
        }
      const auto a = action_vector(r.action);
      double n2 = 0.0;
      for (double v : a) n2 += v * v;
      amax = std::max(amax, std::sqrt(n2));
      rmax = std::max(rmax, std::abs(r.reward));
    }
  // Histogram norms need the ranges, so a second pass.
  double hmax = 0.0;
  for (const auto& t : tasks)
    for (const auto& r : t.records) {
      const auto h = histogram_feature(r.obs, p);
      double n2 = 0.0;
      for (double v : h) n2 += v * v;
      hmax = std::max(hmax, std::sqrt(n2));
    }
  p.c_img = hmax > 0.0 ? hmax : 1.0;
  p.c_action = amax > 0.0 ? amax : 1.0;
  p.c_reward = rmax > 0.0 ? rmax : 1.0;
  return p;
}

std::vector<double> histogram_feature(const Observation& obs, const SampleCostParams& p) {
  const std::size_t plane = obs.height * obs.width;
  if (obs.data.size() != obs.channels * plane) throw DimensionError("histogram: observation data size mismatch");
  if (!p.ranges.empty() && p.ranges.size() != obs.channels)
    throw DimensionError("histogram: " + std::to_string(p.ranges.size()) + " ranges for " +
                         std::to_string(obs.channels) + " channels");
  std::vector<double> h(obs.channels * p.bins, 0.0);
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t c = 0; c < obs.channels; ++c) {
    const auto [lo, hi] = p.ranges.empty() ? std::pair{0.0, 1.0} : p.ranges[c];
    const double width = hi - lo;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t b = 0;
      if (width > 0.0) {
        const double t = (obs.data[c * plane + i] - lo) / width * static_cast<double>(p.bins);
        b = static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(p.bins - 1)));
      }
      h[c * p.bins + b] += inv;
    }
  }
  return h;
}

std::array<double, 5> action_vector(const ScoopAction& a) {
  return {a.x, a.y, a.yaw_radians(), a.depth, a.stiffness == Stiffness::hard ? 1.0 : 0.0};
}

Sample make_sample(const Record& r, const SampleCostParams& p) {
  return {histogram_feature(r.obs, p), action_vector(r.action), r.reward};
}

std::vector<Sample> make_samples(const TaskDataset& d, const SampleCostParams& p) {
  std::vector<Sample> out;
  out.reserve(d.records.size());
  for (const auto& r : d.records) out.push_back(make_sample(r, p));
  return out;
}

double sample_cost(const Sample& a, const Sample& b, const SampleCostParams& p) {
  if (a.hist.size() != b.hist.size()) throw DimensionError("sample cost: histogram length mismatch");
  double di = 0.0, da = 0.0;
  for (std::size_t i = 0; i < a.hist.size(); ++i) di += (a.hist[i] - b.hist[i]) * (a.hist[i] - b.hist[i]);
  for (std::size_t i = 0; i < a.action.size(); ++i) da += (a.action[i] - b.action[i]) * (a.action[i] - b.action[i]);
  const double dr = (a.reward - b.reward) / p.c_reward;
  return std::sqrt(di / (p.c_img * p.c_img) + da / (p.c_action * p.c_action) + dr * dr);
}

double sample_cost(const Record& a, const Record& b, const SampleCostParams& p) {
  return sample_cost(make_sample(a, p), make_sample(b, p), p);
}

namespace {

std::vector<double> cost_matrix(std::span<const Sample> a, std::span<const Sample> b, const SampleCostParams& p) {
  std::vector<double> c(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) c[i * b.size() + j] = sample_cost(a[i], b[j], p);
  return c;
}

std::vector<double> transpose(std::span<const double> c, std::size_t rows, std::size_t cols) {
  std::vector<double> t(c.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = c[i * cols + j];
  return t;
}

double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

// OT value symmetrized over the two iteration orders, so that swapping the
// datasets gives the same number to the last bit.
OtResult symmetric_ot(std::span<const double> c, std::size_t rows, std::size_t cols, double eps,
                      const SinkhornOptions& o) {
  const OtResult ab = entropic_ot(c, rows, cols, eps, o.max_iter, o.tol);
  const auto ct = transpose(c, rows, cols);
  const OtResult ba = entropic_ot(ct, cols, rows, eps, o.max_iter, o.tol);
  OtResult r;
  r.value = 0.5 * (ab.value + ba.value);
  r.iterations = std::max(ab.iterations, ba.iterations);
  r.marginal_error = std::max(ab.marginal_error, ba.marginal_error);
  r.converged = ab.converged && ba.converged;
  return r;
}

}  // namespace

OtResult entropic_ot(std::span<const double> cost, std::size_t rows, std::size_t cols, double eps, int max_iter,
                     double tol) {
  if (rows == 0 || cols == 0) throw DimensionError("entropic OT: empty marginal");
  if (cost.size() != rows * cols) throw DimensionError("entropic OT: cost matrix size mismatch");
  if (!(eps > 0.0)) throw ConfigError("entropic OT: eps must be positive");
  const double log_a = -std::log(static_cast<double>(rows));
  const double log_b = -std::log(static_cast<double>(cols));
  std::vector<double> f(rows, 0.0), g(cols, 0.0), tmp(std::max(rows, cols));
  OtResult res;

  // Stabilized log-sum-exp over one row or column.
  auto lse = [&](std::size_t n, auto&& term) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      tmp[k] = term(k);
      m = std::max(m, tmp[k]);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += std::exp(tmp[k] - m);
    return m + std::log(s);
  };

  for (int it = 1; it <= max_iter; ++it) {
    for (std::size_t i = 0; i < rows; ++i)
      f[i] = -eps * lse(cols, [&](std::size_t j) { return log_b + (g[j] - cost[i * cols + j]) / eps; });
    for (std::size_t j = 0; j < cols; ++j)
      g[j] = -eps * lse(rows, [&](std::size_t i) { return log_a + (f[i] - cost[i * cols + j]) / eps; });
    // Columns are now exact; measure the row marginal violation.
    double err = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += std::exp(log_a + log_b + (f[i] + g[j] - cost[i * cols + j]) / eps);
      err = std::max(err, std::abs(s - std::exp(log_a)));
    }
    res.iterations = it;
    res.marginal_error = err;
    if (err < tol) {
      res.converged = true;
      break;
    }
  }
  double v = 0.0;
  for (double x : f) v += x;
  v /= static_cast<double>(rows);
  double w = 0.0;
  for (double x : g) w += x;
  res.value = v + w / static_cast<double>(cols);
  return res;
}

Divergence sinkhorn_divergence(std::span<const Sample> a, std::span<const Sample> b, const SampleCostParams& p,
                               const SinkhornOptions& opts) {
  if (a.empty() || b.empty()) throw ConfigError("sinkhorn divergence: both datasets must be nonempty");
  p.validate();
  const auto cab = cost_matrix(a, b, p);
  Divergence d;
  d.eps = opts.eps > 0.0 ? opts.eps : opts.eps_scale * median_of(cab);
  if (!(d.eps > 0.0)) {
    // Every cross cost is zero: the distributions coincide.
    d.value = 0.0;
    return d;
  }
  const auto caa = cost_matrix(a, a, p);
  const auto cbb = cost_matrix(b, b, p);
  const OtResult ab = symmetric_ot(cab, a.size(), b.size(), d.eps, opts);
  const OtResult aa = symmetric_ot(caa, a.size(), a.size(), d.eps, opts);
  const OtResult bb = symmetric_ot(cbb, b.size(), b.size(), d.eps, opts);
  d.value = ab.value - 0.5 * (aa.value + bb.value);
  d.converged = ab.converged && aa.converged && bb.converged;
  return d;
}

Divergence sinkhorn_divergence(const TaskDataset& a, const TaskDataset& b, const SampleCostParams& p,
                               const SinkhornOptions& opts) {
  const auto sa = make_samples(a, p);
  const auto sb = make_samples(b, p);
  return sinkhorn_divergence(sa, sb, p, opts);
}

std::vector<double> DistanceMatrix::row(std::size_t i) const {
  return {values.begin() + static_cast<std::ptrdiff_t>(i * n), values.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)};
}

DistanceMatrix distance_matrix(std::span<const TaskDataset> tasks, const SampleCostParams& p,
                               const SinkhornOptions& opts) {
  DistanceMatrix m;
  m.n = tasks.size();
  m.values.assign(m.n * m.n, 0.0);
  std::vector<std::vector<Sample>> samples;
  samples.reserve(m.n);
  for (const auto& t : tasks) samples.push_back(make_samples(t, p));
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = i + 1; j < m.n; ++j) {
      const auto d = sinkhorn_divergence(samples[i], samples[j], p, opts);
      m.values[i * m.n + j] = m.values[j * m.n + i] = d.value;
      m.all_converged = m.all_converged && d.converged;
    }
  return m;
}

namespace {

void check_split_input(std::span<const double> d, std::size_t ref) {
  if (d.size() < 2) throw SplitError("split needs at least 2 tasks, got " + std::to_string(d.size()));
  if (ref >= d.size()) throw SplitError("reference task index out of range");
  for (double v : d)
    if (!std::isfinite(v)) throw SplitError("non-finite task distance");
}

Split index_half_split(std::size_t m, std::size_t ref) {
  Split s;
  s.fallback = true;
  const std::size_t n_mean = (m + 1) / 2;
  s.mean.push_back(ref);
  for (std::size_t i = 0; i < m; ++i) {
    if (i == ref) continue;
    (s.mean.size() < n_mean ? s.mean : s.kernel).push_back(i);
  }
  std::sort(s.mean.begin(), s.mean.end());
  return s;
}

}  // namespace

Split median_split(std::span<const double> d, std::size_t ref) {
  check_split_input(d, ref);
  const double med = median_of({d.begin(), d.end()});
  Split s;
  for (std::size_t i = 0; i < d.size(); ++i) (i == ref || d[i] <= med ? s.mean : s.kernel).push_back(i);
  if (s.kernel.empty()) return index_half_split(d.size(), ref);
  return s;
}

Split count_split(std::span<const double> d, std::size_t ref) {
  check_split_input(d, ref);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (a == ref || b == ref) return a == ref && b != ref;
    return d[a] < d[b];
  });
  Split s;
  const std::size_t n_mean = (d.size() + 1) / 2;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_mean ? s.mean : s.kernel).push_back(order[k]);
  std::sort(s.mean.begin(), s.mean.end());
  std::sort(s.kernel.begin(), s.kernel.end());
  return s;
}

}  // namespace kcmd::ot
