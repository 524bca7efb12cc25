#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "suggest/numerics/tensor.hpp"

namespace suggest::num {

/// Learning rate factor * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
struct NoamSchedule {
  std::size_t model_dim = 300;
  std::size_t warmup_steps = 4000;
  double factor = 1.0;

  /// Throws Error for step 0.
  double lr(std::uint64_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

/// Moment buffers keyed by parameter name.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

/// One bias-corrected Adam update of every parameter from its `grad` buffer
/// (a missing buffer counts as zero). All gradients are checked before any
/// parameter changes; a non-finite value throws Error naming the parameter.
template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr);

extern template void adam_step<float>(std::span<const NamedParam<float>>, AdamState<float>&, double);
extern template void adam_step<double>(std::span<const NamedParam<double>>, AdamState<double>&, double);

}  // namespace suggest::num
