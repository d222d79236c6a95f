#pragma once

// Quantization co-training: a 2-bit view, a 1-bit view and a
// stochastic-precision view of one shared latent model are trained
// jointly with
//
//   L = L_int2 + lambda1 (L_int1 + L_SP) + lambda2 (Omega_int1 + Omega_SP)
//
// where Omega_x = KL(SG(p_int2) || p_x). Disabling stochastic precision
// drops the SP terms; disabling KL drops the Omega terms.

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "qct/model.hpp"
#include "qct/optim.hpp"

namespace qct {

enum class TrainMode { Float, Qat, Cotrain };

struct CoTrainConfig {
  TrainMode mode = TrainMode::Cotrain;
  int bits = 2;  // view precision for Qat mode
  int cnn_bits = 32;
  int decoder_bits = 4;
  ScalingMode scaling = ScalingMode::Learned;
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  double p_min = 0.2;
  double p_max = 0.9;
  bool enable_kl = true;
  bool enable_sp = true;
  double peak_lr = 2e-3;
  long warmup_steps = 300;
  double clip_norm = 5.0;
  std::size_t epochs = 12;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("train: lambdas must be non-negative");
    if (!(p_min > 0.0 && p_min <= p_max && p_max < 1.0)) {
      throw ConfigError("train: need 0 < p_min <= p_max < 1");
    }
    if (mode == TrainMode::Qat && !supported_bits(bits)) throw ConfigError("train: unsupported --bits");
    if (!valid_bits(cnn_bits) || !valid_bits(decoder_bits)) throw ConfigError("train: invalid cnn/decoder bits");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(peak_lr > 0.0) || !(clip_norm > 0.0)) throw ConfigError("train: lr and clip norm must be positive");
  }
};

/// Per-layer binarization probabilities, log-linear from p_min (layer 1)
/// to p_max (layer L).
inline std::vector<double> schedule_probs(std::size_t layers, double p_min, double p_max) {
  if (layers == 0) throw ConfigError("schedule_probs: need at least one layer");
  if (!(p_min > 0.0 && p_min < 1.0 && p_max > 0.0 && p_max < 1.0)) {
    throw ConfigError("schedule_probs: probabilities must lie in (0, 1)");
  }
  std::vector<double> p(layers);
  if (layers == 1) {
    p[0] = p_min;
    return p;
  }
  const double lo = std::log(p_min), hi = std::log(p_max);
  for (std::size_t l = 0; l < layers; ++l) {
    p[l] = std::exp(lo + static_cast<double>(l) / static_cast<double>(layers - 1) * (hi - lo));
  }
  p.front() = p_min;
  p.back() = p_max;
  return p;
}

/// Binarizes encoder layer l with probability probs[l]; every other
/// setting is inherited from `base`.
inline PrecisionAssignment sample_precision(const std::vector<double>& probs, const PrecisionAssignment& base,
                                            std::mt19937_64& rng) {
  if (probs.size() != base.encoder_bits.size()) throw AssignmentError("sample_precision: schedule length mismatch");
  PrecisionAssignment out = base;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t l = 0; l < probs.size(); ++l) {
    if (u(rng) < probs[l]) out.encoder_bits[l] = 1;
  }
  return out;
}

/// Binarizes a uniformly random subset of exactly ceil(L/2) encoder layers.
inline PrecisionAssignment sample_half_binary(const PrecisionAssignment& base, std::mt19937_64& rng) {
  const std::size_t layers = base.encoder_bits.size();
  if (layers == 0) throw ConfigError("sample_half_binary: need at least one layer");
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  PrecisionAssignment out = base;
  for (std::size_t i = 0; i < (layers + 1) / 2; ++i) out.encoder_bits[order[i]] = 1;
  return out;
}

/// L_int2 + lambda1 * L_int1.
template <class T>
T cotrain_loss(const T& l_int2, const T& l_int1, double lambda1) {
  if (!(lambda1 >= 0.0)) throw ConfigError("cotrain_loss: lambda1 must be non-negative");
  return l_int2 + lambda1 * l_int1;
}

struct LossWeights {
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  bool enable_kl = true;
  bool enable_sp = true;
};

/// Weighted combination of the co-training terms. Terms with zero weight
/// (or disabled) are left out of the sum rather than multiplied by zero.
template <class T>
T full_loss(const T& l_int2, const T& l_int1, const T& l_sp, const T& omega_int1, const T& omega_sp,
            const LossWeights& w) {
  if (!(w.lambda1 >= 0.0) || !(w.lambda2 >= 0.0)) throw ConfigError("full_loss: lambdas must be non-negative");
  T total = l_int2;
  if (w.lambda1 != 0.0) total = total + w.lambda1 * (w.enable_sp ? l_int1 + l_sp : l_int1);
  if (w.enable_kl && w.lambda2 != 0.0) total = total + w.lambda2 * (w.enable_sp ? omega_int1 + omega_sp : omega_int1);
  return total;
}

/// KL regularizer between a teacher and a student view: equal-weight mean
/// over the frame-level CTC posteriors and the decoder token posteriors.
inline Tensor view_kl(const ViewOutput& teacher, const ViewOutput& student) {
  Tensor ctc = kl_regularizer(teacher.encoder.logits, student.encoder.logits);
  Tensor dec = kl_regularizer(teacher.decoder_logits, student.decoder_logits);
  return scale(add(ctc, dec), 0.5);
}

struct LossBreakdown {
  double l_int2 = 0.0;  // the primary view (sole view outside co-training)
  double l_int1 = 0.0;
  double l_sp = 0.0;
  double omega_int1 = 0.0;
  double omega_sp = 0.0;
  double total = 0.0;
};

struct TrainState {
  AdamState optimizer;
  long step = 0;
  std::size_t epoch = 0;
  std::mt19937_64 rng;
  LossBreakdown last;
  double last_grad_norm = 0.0;
  double last_lr = 0.0;
  PrecisionAssignment last_sp;

  explicit TrainState(std::uint64_t seed = 1) : rng(seed) {}
};

/// The views a configuration trains.
struct ViewPlan {
  PrecisionAssignment primary;  // 2-bit view in co-training
  PrecisionAssignment low;      // 1-bit view (co-training only)
  std::vector<double> schedule;
};

inline ViewPlan plan_views(const CoTrainConfig& cfg, std::size_t blocks) {
  ViewPlan plan;
  switch (cfg.mode) {
    case TrainMode::Float:
      plan.primary = PrecisionAssignment::full_precision(blocks);
      break;
    case TrainMode::Qat:
      plan.primary = PrecisionAssignment::uniform(blocks, cfg.bits, cfg.cnn_bits, cfg.decoder_bits);
      break;
    case TrainMode::Cotrain:
      plan.primary = PrecisionAssignment::uniform(blocks, 2, cfg.cnn_bits, cfg.decoder_bits);
      plan.low = PrecisionAssignment::uniform(blocks, 1, cfg.cnn_bits, cfg.decoder_bits);
      plan.schedule = schedule_probs(blocks, cfg.p_min, cfg.p_max);
      break;
  }
  return plan;
}

/// Creates every scale the configuration will train.
inline void prepare_model(SharedModel& model, const CoTrainConfig& cfg) {
  cfg.validate();
  model.scaling = cfg.scaling;
  ViewPlan plan = plan_views(cfg, model.config.num_blocks);
  model.ensure_scales(plan.primary);
  if (cfg.mode == TrainMode::Cotrain) model.ensure_scales(plan.low);
}

/// Forward graph of one training step, before backward.
struct StepGraph {
  ViewOutput primary;
  ViewOutput low;
  ViewOutput sp;
  Tensor omega_int1;
  Tensor omega_sp;
  Tensor total;
  PrecisionAssignment sp_assignment;
  LossBreakdown breakdown;
};

inline StepGraph build_step_graph(const SharedModel& model, const Batch& batch, const CoTrainConfig& cfg,
                                  std::mt19937_64& rng) {
  const ViewPlan plan = plan_views(cfg, model.config.num_blocks);
  StepGraph g;
  g.primary = forward_view(model, batch, plan.primary);
  g.breakdown.l_int2 = g.primary.loss.item();
  if (cfg.mode != TrainMode::Cotrain) {
    g.total = g.primary.loss;
    g.breakdown.total = g.total.item();
    return g;
  }
  const LossWeights w{cfg.lambda1, cfg.lambda2, cfg.enable_kl, cfg.enable_sp};
  const bool use_kl = cfg.enable_kl && cfg.lambda2 != 0.0;
  const bool need_views = cfg.lambda1 != 0.0 || use_kl;
  if (need_views) {
    g.low = forward_view(model, batch, plan.low);
    g.breakdown.l_int1 = g.low.loss.item();
    if (cfg.enable_sp) {
      g.sp_assignment = sample_precision(plan.schedule, plan.primary, rng);
      g.sp = forward_view(model, batch, g.sp_assignment);
      g.breakdown.l_sp = g.sp.loss.item();
    }
    if (use_kl) {
      g.omega_int1 = view_kl(g.primary, g.low);
      g.breakdown.omega_int1 = g.omega_int1.item();
      if (cfg.enable_sp) {
        g.omega_sp = view_kl(g.primary, g.sp);
        g.breakdown.omega_sp = g.omega_sp.item();
      }
    }
  }
  g.total = full_loss(g.primary.loss, g.low.loss, g.sp.loss, g.omega_int1, g.omega_sp, w);
  g.breakdown.total = g.total.item();
  return g;
}

/// One optimizer step on the configured joint loss. On a non-finite loss
/// throws DivergenceError and leaves model and state untouched.
inline LossBreakdown train_step(SharedModel& model, const Batch& batch, const CoTrainConfig& cfg, TrainState& state) {
  if (batch.targets.empty()) throw ContractError("train_step: empty batch");
  const auto rng_before = state.rng;
  StepGraph g = build_step_graph(model, batch, cfg, state.rng);
  if (!std::isfinite(g.breakdown.total)) {
    state.rng = rng_before;
    throw DivergenceError("non-finite loss at step " + std::to_string(state.step + 1));
  }
  model.zero_grad();
  backward(g.total);
  auto params = model.trainable();
  state.last_grad_norm = clip_grad_norm(params, cfg.clip_norm);
  state.last_lr = warmup_lr(state.step + 1, cfg.peak_lr, cfg.warmup_steps);
  adam_step(params, state.optimizer, AdamHyper{state.last_lr, 0.9, 0.98, 1e-9});
  model.clamp_scales();
  ++state.step;
  state.last = g.breakdown;
  state.last_sp = g.sp_assignment;
  return g.breakdown;
}

}  // namespace qct
