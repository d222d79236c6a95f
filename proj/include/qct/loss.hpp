#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "qct/nn.hpp"

namespace qct {

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
inline std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t need = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) need += target[i] == target[i - 1] ? 1 : 0;
  return need;
}

/// -log p(target | log_probs) for one utterance; optionally writes
/// d(-log p)/d(log_probs) into `grad` (same layout as log_probs, added to).
inline double ctc_utterance(const double* log_probs, std::size_t frames, std::size_t classes,
                            std::span<const int> target, std::size_t blank, double* grad, double grad_scale) {
  if (frames == 0 || ctc_min_frames(target) > frames) {
    throw InfeasibleTargetError("ctc_loss: " + std::to_string(target.size()) + " labels cannot align to " +
                                std::to_string(frames) + " frames");
  }
  for (int label : target) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes || static_cast<std::size_t>(label) == blank) {
      throw IndexError("ctc_loss: label out of range or equal to blank");
    }
  }
  const std::size_t states = 2 * target.size() + 1;
  auto label_at = [&](std::size_t s) { return s % 2 == 0 ? blank : static_cast<std::size_t>(target[s / 2]); };
  auto can_skip = [&](std::size_t s) { return s % 2 == 1 && s >= 2 && label_at(s) != label_at(s - 2); };

  std::vector<double> alpha(frames * states, kNegInf), beta(frames * states, kNegInf);
  alpha[0] = log_probs[blank];
  if (states > 1) alpha[1] = log_probs[label_at(1)];
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double acc = alpha[(t - 1) * states + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * states + s - 1]);
      if (can_skip(s)) acc = log_add(acc, alpha[(t - 1) * states + s - 2]);
      alpha[t * states + s] = acc == kNegInf ? kNegInf : acc + log_probs[t * classes + label_at(s)];
    }
  }
  const std::size_t last = (frames - 1) * states;
  double log_p = alpha[last + states - 1];
  if (states > 1) log_p = log_add(log_p, alpha[last + states - 2]);
  if (grad == nullptr) return -log_p;

  beta[last + states - 1] = log_probs[(frames - 1) * classes + label_at(states - 1)];
  if (states > 1) beta[last + states - 2] = log_probs[(frames - 1) * classes + label_at(states - 2)];
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      double acc = beta[(t + 1) * states + s];
      if (s + 1 < states) acc = log_add(acc, beta[(t + 1) * states + s + 1]);
      if (s + 2 < states && can_skip(s + 2)) acc = log_add(acc, beta[(t + 1) * states + s + 2]);
      beta[t * states + s] = acc == kNegInf ? kNegInf : acc + log_probs[t * classes + label_at(s)];
    }
  }
  // d(-log p)/d lp[t][k] = -sum_{s: label(s)=k} alpha*beta / (y_t(k) * p).
  std::vector<double> occupancy(classes);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kNegInf);
    for (std::size_t s = 0; s < states; ++s) {
      const double ab = alpha[t * states + s] + beta[t * states + s];
      occupancy[label_at(s)] = log_add(occupancy[label_at(s)], ab);
    }
    for (std::size_t k = 0; k < classes; ++k) {
      if (occupancy[k] == kNegInf) continue;
      grad[t * classes + k] -= grad_scale * std::exp(occupancy[k] - log_probs[t * classes + k] - log_p);
    }
  }
  return -log_p;
}

}  // namespace detail

/// Mean over utterances of the CTC negative log-likelihood. `log_probs` is
/// a packed [frames x classes] matrix of per-frame log-probabilities;
/// `blank` is the blank class index.
inline Tensor ctc_loss(const Tensor& log_probs, const Segments& segs, const std::vector<std::vector<int>>& targets,
                       std::size_t blank) {
  detail::require_matrix(log_probs, "ctc_loss");
  if (segs.count() != targets.size() || segs.total() != log_probs.rows() || segs.count() == 0) {
    throw DimensionError("ctc_loss: segments and targets disagree");
  }
  const std::size_t classes = log_probs.cols();
  if (blank >= classes) throw IndexError("ctc_loss: blank index out of range");
  Tensor out = detail::make_result(Shape{1}, {&log_probs});
  const double inv_n = 1.0 / static_cast<double>(segs.count());
  std::vector<double> grad;
  if (out.requires_grad()) grad.assign(log_probs.numel(), 0.0);
  double total = 0.0;
  for (std::size_t u = 0; u < segs.count(); ++u) {
    double* g = grad.empty() ? nullptr : &grad[segs.begin(u) * classes];
    total += detail::ctc_utterance(&log_probs.values()[segs.begin(u) * classes], segs.length(u), classes,
                                   targets[u], blank, g, inv_n);
  }
  out.mutable_values()[0] = total * inv_n;
  if (out.requires_grad()) {
    out.node()->backward_fn = [grad = std::move(grad)](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
    };
  }
  return out;
}

/// Single-utterance form: log_probs is [T x (V+1)].
inline Tensor ctc_loss(const Tensor& log_probs, const std::vector<int>& target, std::size_t blank) {
  return ctc_loss(log_probs, Segments::from_lengths({log_probs.rows()}), {target}, blank);
}

/// Mean over rows of -log softmax(logits)[target].
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& targets) {
  detail::require_matrix(logits, "cross_entropy_loss");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy_loss: one target per row required");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) throw IndexError("cross_entropy_loss: target out of range");
  }
  Tensor out = detail::make_result(Shape{1}, {&logits});
  std::vector<double> logp(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    detail::log_softmax_row(&logits.values()[r * c], &logp[r * c], c);
    total -= logp[r * c + targets[r]];
  }
  out.mutable_values()[0] = total / static_cast<double>(n);
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c, targets, logp = std::move(logp)](Node& self) {
      auto& g = detail::input_grad(self, 0);
      const double s = self.grad[0] / static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += s * std::exp(logp[r * c + j]);
        g[r * c + targets[r]] -= s;
      }
    };
  }
  return out;
}

/// D_KL(p || q) in nats between two discrete distributions.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ContractError("kl_divergence: support mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return acc;
}

/// Mean over rows of D_KL(softmax(teacher) || softmax(student)). The
/// teacher side passes through stop_gradient, so only the student logits
/// receive a gradient: (p_student - p_teacher) / rows.
inline Tensor kl_regularizer(const Tensor& teacher_logits, const Tensor& student_logits) {
  detail::require_matrix(teacher_logits, "kl_regularizer");
  detail::require_matrix(student_logits, "kl_regularizer");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractError("kl_regularizer: support mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                        shape_str(student_logits.shape()));
  }
  const Tensor teacher = stop_gradient(teacher_logits);
  const std::size_t n = student_logits.rows(), c = student_logits.cols();
  Tensor out = detail::make_result(Shape{1}, {&student_logits, &teacher});
  std::vector<double> lt(n * c), ls(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    detail::log_softmax_row(&teacher.values()[r * c], &lt[r * c], c);
    detail::log_softmax_row(&student_logits.values()[r * c], &ls[r * c], c);
    for (std::size_t j = 0; j < c; ++j) total += std::exp(lt[r * c + j]) * (lt[r * c + j] - ls[r * c + j]);
  }
  out.mutable_values()[0] = total / static_cast<double>(n);
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c, lt = std::move(lt), ls = std::move(ls)](Node& self) {
      if (!detail::wants_grad(self, 0)) return;
      auto& g = detail::input_grad(self, 0);
      const double s = self.grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n * c; ++i) g[i] += s * (std::exp(ls[i]) - std::exp(lt[i]));
    };
  }
  return out;
}

}  // namespace qct
