#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "rrl/tensor.hpp"

namespace rrl {

/// Bias-corrected Adam. Moment tensors mirror the parameter shapes; the step
/// counter advances by exactly one per update.
struct AdamState {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  long step = 0;
  std::vector<Tensor> m, v;

  static AdamState init(const std::vector<const Tensor*>& params, float lr) {
    AdamState s;
    s.lr = lr;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor* p : params) {
      s.m.push_back(p->size() > 0 ? Tensor(p->shape) : Tensor());
      s.v.push_back(p->size() > 0 ? Tensor(p->shape) : Tensor());
    }
    return s;
  }
  static AdamState init(const std::vector<Tensor*>& params, float lr) {
    std::vector<const Tensor*> cp(params.begin(), params.end());
    return init(cp, lr);
  }
};

/// One Adam step over a parameter list. Rejects non-finite gradients before
/// touching any state, so a failed call leaves parameters and moments intact.
inline void adam_update(AdamState& state, const std::vector<Tensor*>& params,
                        const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_update: parameter/gradient/state count mismatch");
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params[p]->same_shape(*grads[p]))
      throw std::invalid_argument("adam_update: gradient shape mismatch at parameter " +
                                  std::to_string(p));
    if (!grads[p]->all_finite())
      throw std::runtime_error("adam_update: non-finite gradient at parameter " +
                               std::to_string(p) + "; state unchanged");
  }
  state.step += 1;
  const float b1t = 1.0f - std::pow(state.beta1, static_cast<float>(state.step));
  const float b2t = 1.0f - std::pow(state.beta2, static_cast<float>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const Tensor& g = *grads[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (int64_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g[i] * g[i];
      const float mhat = m[i] / b1t;
      const float vhat = v[i] / b2t;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

inline void adam_update(AdamState& state, const std::vector<Tensor*>& params,
                        const std::vector<Tensor*>& grads) {
  std::vector<const Tensor*> cg(grads.begin(), grads.end());
  adam_update(state, params, cg);
}

}  // namespace rrl
