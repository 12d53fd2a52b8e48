#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kcmd/tensor.hpp"

namespace kcmd::ad {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One Adam update. `grads[i]` pairs with `params[i]`; state moments are
// lazily sized on the first call. A NaN gradient raises OptimizerError naming
// the parameter, before any parameter is touched.
void adam_step(std::span<Tensor> params, std::span<const std::span<const double>> grads, AdamState& state,
               double lr);

// Same, reading each parameter's accumulated grad (missing grad = zero).
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {}

  void zero_grad();
  void step() { adam_step(params_, state_, lr_); }

  double lr() const { return lr_; }
  const AdamState& state() const { return state_; }
  std::span<Tensor> params() { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
  double lr_;
};

}  // namespace kcmd::ad
