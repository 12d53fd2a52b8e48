#include "kcmd/optim.hpp"

#include <cmath>
#include <string>

#include "kcmd/error.hpp"

namespace kcmd::ad {

void adam_step(std::span<Tensor> params, std::span<const std::span<const double>> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size()) {
    throw OptimizerError("adam: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                         " grads");
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  } else if (state.m.size() != params.size()) {
    throw OptimizerError("adam: state tracks " + std::to_string(state.m.size()) + " params, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads[i];
    if (!g.empty() && g.size() != params[i].size()) {
      throw OptimizerError("adam: gradient size mismatch for parameter '" + params[i].name() + "'");
    }
    for (double x : g)
      if (std::isnan(x)) throw OptimizerError("adam: NaN gradient in parameter '" + params[i].name() + "'");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads[i];
    if (g.empty()) continue;
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  std::vector<std::span<const double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state, lr);
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace kcmd::ad
