#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "qct/tensor.hpp"

namespace qct {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  long step = 0;
};

/// One bias-corrected Adam update over parallel parameter/gradient lists.
/// Parameters whose gradient buffer is empty are treated as zero-gradient.
inline void adam_step(std::vector<Tensor*> params, AdamState& state, const AdamHyper& hyper) {
  if (state.first_moment.empty()) {
    for (Tensor* p : params) {
      state.first_moment.emplace_back(p->numel(), 0.0);
      state.second_moment.emplace_back(p->numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("adam_step: state/parameter count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != p.numel()) throw ContractError("adam_step: state shape differs from parameter");
    auto grad = p.grad();
    auto values = p.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      values[j] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
  }
}

/// Linear warmup to `peak`, then inverse square-root decay.
inline double warmup_lr(long step, double peak, long warmup_steps) {
  const double s = static_cast<double>(std::max<long>(step, 1));
  const double w = static_cast<double>(std::max<long>(warmup_steps, 1));
  return peak * std::min(s / w, std::sqrt(w / s));
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor* p : params)
    for (double g : p->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Tensor* p : params) {
      if (p->grad().empty()) continue;
      for (double& g : p->mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace qct
