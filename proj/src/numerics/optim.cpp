#include "suggest/numerics/optim.hpp"

#include <algorithm>
#include <cmath>

namespace suggest::num {

double NoamSchedule::lr(std::uint64_t step) const {
  if (step == 0) throw Error("noam_lr: step must be >= 1");
  if (warmup_steps == 0) throw Error("noam_lr: warmup_steps must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return factor / std::sqrt(static_cast<double>(model_dim)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor) throw Error("adam_step: null parameter " + p.name);
    if (p.tensor->has_grad() && p.tensor->grad.size() != p.tensor->size())
      throw ShapeError("adam_step: gradient of " + p.name + " does not match its shape " + shape_str(p.tensor->shape));
    for (T gv : p.tensor->grad)
      if (!std::isfinite(gv)) throw Error("adam_step: non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& p : params) {
    Tensor<T>& t = *p.tensor;
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.size() != t.size()) m.assign(t.size(), T(0));
    if (v.size() != t.size()) v.assign(t.size(), T(0));
    const bool has = t.has_grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = has ? static_cast<double>(t.grad[i]) : 0.0;
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      t.data[i] = static_cast<T>(t.data[i] - lr * mhat / (std::sqrt(vhat) + state.config.eps));
    }
  }
}

template void adam_step<float>(std::span<const NamedParam<float>>, AdamState<float>&, double);
template void adam_step<double>(std::span<const NamedParam<double>>, AdamState<double>&, double);

}  // namespace suggest::num
