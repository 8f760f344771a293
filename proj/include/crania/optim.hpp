#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crania/tensor.hpp"

namespace crania {

/// A trainable tensor with its Adam state. The gradient buffer exists from
/// construction so an update step never has to special-case parameters that
/// no loss has reached yet.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> adam_m, adam_v;
  std::int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    value.set_requires_grad(true);
    value.zero_grad();
    adam_m.assign(value.values().size(), T(0));
    adam_v.assign(value.values().size(), T(0));
  }
};

/// One Adam update with bias correction, applied in place. Per-parameter step
/// counts keep the bias-correction schedule intact across checkpoint resume.
/// Gradients are zeroed after the step.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, T lr,
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
  if (!(lr > T(0))) throw config_error("adam_step: learning rate must be positive");
  for (Parameter<T>* p : params) {
    p->step_count += 1;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(p->step_count));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(p->step_count));
    auto& g = p->value.grad();
    auto& val = p->value.values();
    auto& m = p->adam_m;
    auto& v = p->adam_v;
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
      v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p->value.zero_grad();
  }
}

}  // namespace crania
