#pragma once

// Desk-scale Conformer encoder with CTC head and a small Transformer
// decoder. All precision views of the model read the same latent
// parameters; a view differs only in how each quantizable weight is
// resolved (latent passthrough at 32 bits, or quantized with that
// precision's tensor-wise scale).

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "qct/loss.hpp"
#include "qct/nn.hpp"
#include "qct/quantizer.hpp"
#include "qct/tensor.hpp"

namespace qct {

struct ModelConfig {
  std::size_t num_blocks = 4;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t conv_kernel = 7;
  std::size_t vocab = 20;
  std::size_t feature_dim = 16;
  std::size_t decoder_layers = 1;
  std::size_t subsample = 2;
  double gamma = 0.2;
  std::uint64_t seed = 1;

  /// CTC blank is class `vocab`; the decoder uses the same index as its
  /// shared start/end-of-sequence symbol.
  std::size_t blank() const { return vocab; }
  std::size_t eos() const { return vocab; }
  std::size_t classes() const { return vocab + 1; }

  void validate() const {
    if (num_blocks == 0) throw ConfigError("model: num_blocks must be positive");
    if (model_dim == 0 || ffn_dim == 0 || feature_dim == 0 || vocab < 2) {
      throw ConfigError("model: dimensions must be positive and vocab >= 2");
    }
    if (heads == 0 || model_dim % heads != 0) throw ConfigError("model: model_dim must be divisible by heads");
    if (conv_kernel == 0 || conv_kernel % 2 == 0) throw ConfigError("model: conv_kernel must be odd");
    if (subsample == 0) throw ConfigError("model: subsample must be positive");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("model: gamma must lie in [0, 1]");
  }
};

enum class QuantGroup { Body, Conv, Decoder };

/// A quantizable weight tensor and the knob that governs its bit-width.
struct QuantSlot {
  std::string name;
  QuantGroup group = QuantGroup::Body;
  std::size_t block = 0;
};

inline bool valid_bits(int bits) { return bits == 32 || supported_bits(bits); }

/// Bit-width of every quantizable tensor. FFN and MHSA weights follow
/// `encoder_bits[block]`, convolution-module weights `conv_bits[block]`,
/// decoder weights `decoder_bits`; 32 means full precision.
struct PrecisionAssignment {
  std::vector<int> encoder_bits;
  std::vector<int> conv_bits;
  int decoder_bits = 32;

  static PrecisionAssignment uniform(std::size_t blocks, int encoder, int conv, int decoder) {
    return {std::vector<int>(blocks, encoder), std::vector<int>(blocks, conv), decoder};
  }
  static PrecisionAssignment full_precision(std::size_t blocks) { return uniform(blocks, 32, 32, 32); }

  int bits_for(const QuantSlot& slot) const {
    switch (slot.group) {
      case QuantGroup::Body: return encoder_bits.at(slot.block);
      case QuantGroup::Conv: return conv_bits.at(slot.block);
      case QuantGroup::Decoder: return decoder_bits;
    }
    return 32;
  }

  void validate(std::size_t blocks) const {
    if (encoder_bits.size() != blocks || conv_bits.size() != blocks) {
      throw AssignmentError("precision assignment covers " + std::to_string(encoder_bits.size()) +
                            " encoder blocks, model has " + std::to_string(blocks));
    }
    auto check = [](int b) {
      if (!valid_bits(b)) throw AssignmentError("invalid bit-width " + std::to_string(b));
    };
    for (int b : encoder_bits) check(b);
    for (int b : conv_bits) check(b);
    check(decoder_bits);
  }

  bool operator==(const PrecisionAssignment&) const = default;
};

enum class ScalingMode { Learned, AbsmeanFixed };

class SharedModel {
 public:
  ModelConfig config;
  ScalingMode scaling = ScalingMode::Learned;

  SharedModel() = default;
  SharedModel(SharedModel&&) = default;
  SharedModel& operator=(SharedModel&&) = default;
  SharedModel(const SharedModel&) = delete;
  SharedModel& operator=(const SharedModel&) = delete;

  const std::vector<Parameter>& parameters() const { return params_; }
  const std::vector<QuantSlot>& quant_slots() const { return slots_; }
  const std::map<std::pair<std::string, int>, TensorScale>& scales() const { return scales_; }

  const Tensor& param(const std::string& name) const { return params_.at(index_of(name)).tensor; }
  Tensor& param(const std::string& name) { return params_.at(index_of(name)).tensor; }
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  const QuantSlot* find_slot(const std::string& name) const {
    auto it = slot_index_.find(name);
    return it == slot_index_.end() ? nullptr : &slots_[it->second];
  }

  const TensorScale* find_scale(const std::string& owner, int bits) const {
    auto it = scales_.find({owner, bits});
    return it == scales_.end() ? nullptr : &it->second;
  }
  TensorScale* find_scale(const std::string& owner, int bits) {
    auto it = scales_.find({owner, bits});
    return it == scales_.end() ? nullptr : &it->second;
  }

  /// Creates (absmean-initialized) scales for every quantized tensor of the
  /// assignment that lacks one. No-op for fixed absmean scaling.
  void ensure_scales(const PrecisionAssignment& assignment) {
    assignment.validate(config.num_blocks);
    if (scaling != ScalingMode::Learned) return;
    for (const auto& slot : slots_) {
      const int bits = assignment.bits_for(slot);
      if (bits == 32 || find_scale(slot.name, bits)) continue;
      set_scale(slot.name, bits, init_scale(param(slot.name).values(), bits));
    }
  }

  void set_scale(const std::string& owner, int bits, double alpha) {
    if (!find_slot(owner)) throw ContractError("no quantizable tensor named " + owner);
    scales_[{owner, bits}] = TensorScale{owner, bits, Tensor::scalar(std::max(alpha, kMinScale), true)};
  }

  /// Latent parameters followed by scales, in a fixed order.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    for (auto& p : params_) out.push_back(&p.tensor);
    for (auto& [key, s] : scales_) out.push_back(&s.alpha);
    return out;
  }

  void zero_grad() {
    for (Tensor* t : trainable()) t->zero_grad();
  }

  void clamp_scales() {
    for (auto& [key, s] : scales_) s.clamp();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  /// Deep copy: values only, fresh leaves, no gradients.
  SharedModel clone() const {
    SharedModel m;
    m.config = config;
    m.scaling = scaling;
    m.slots_ = slots_;
    m.slot_index_ = slot_index_;
    m.index_ = index_;
    for (const auto& p : params_) m.params_.push_back({p.name, p.tensor.clone(true)});
    for (const auto& [key, s] : scales_) m.scales_[key] = TensorScale{s.owner, s.bits, s.alpha.clone(true)};
    return m;
  }

  void add_param(std::string name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(t)});
  }

  void add_slot(QuantSlot slot) {
    slot_index_[slot.name] = slots_.size();
    slots_.push_back(std::move(slot));
  }

 private:
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<QuantSlot> slots_;
  std::unordered_map<std::string, std::size_t> slot_index_;
  std::map<std::pair<std::string, int>, TensorScale> scales_;
};

namespace detail {

struct ModelBuilder {
  SharedModel& model;
  std::mt19937_64 rng;

  void matrix(const std::string& name, std::size_t rows, std::size_t cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    uniform(name, {rows, cols}, limit);
  }
  void uniform(const std::string& name, Shape shape, double limit) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    model.add_param(name, Tensor(std::move(shape), std::move(v), true));
  }
  void constant(const std::string& name, std::size_t n, double value) {
    model.add_param(name, Tensor(Shape{n}, std::vector<double>(n, value), true));
  }
  void norm(const std::string& prefix, std::size_t d) {
    constant(prefix + ".g", d, 1.0);
    constant(prefix + ".b", d, 0.0);
  }
  void quant_matrix(const std::string& name, std::size_t rows, std::size_t cols, QuantGroup g, std::size_t block) {
    matrix(name, rows, cols);
    model.add_slot({name, g, block});
  }
  void ffn(const std::string& p, std::size_t d, std::size_t ff, QuantGroup g, std::size_t block) {
    norm(p + ".ln", d);
    quant_matrix(p + ".w1", d, ff, g, block);
    constant(p + ".b1", ff, 0.0);
    quant_matrix(p + ".w2", ff, d, g, block);
    constant(p + ".b2", d, 0.0);
  }
  void attention(const std::string& p, std::size_t d, QuantGroup g, std::size_t block) {
    norm(p + ".ln", d);
    for (const char* w : {"q", "k", "v", "o"}) {
      quant_matrix(p + ".w" + w, d, d, g, block);
      constant(p + ".b" + w, d, 0.0);
    }
  }
};

}  // namespace detail

inline SharedModel build_model(const ModelConfig& config, ScalingMode scaling = ScalingMode::Learned) {
  config.validate();
  SharedModel model;
  model.config = config;
  model.scaling = scaling;
  detail::ModelBuilder b{model, std::mt19937_64(config.seed)};
  const std::size_t d = config.model_dim, ff = config.ffn_dim, k = config.conv_kernel;

  b.matrix("frontend.w", config.feature_dim * config.subsample, d);
  b.constant("frontend.b", d, 0.0);
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    const std::string p = "enc." + std::to_string(i);
    b.ffn(p + ".ffn1", d, ff, QuantGroup::Body, i);
    b.attention(p + ".mhsa", d, QuantGroup::Body, i);
    b.norm(p + ".conv.ln", d);
    b.quant_matrix(p + ".conv.pw1", d, 2 * d, QuantGroup::Conv, i);
    b.constant(p + ".conv.pw1_b", 2 * d, 0.0);
    b.uniform(p + ".conv.dw", {k, d}, 1.0 / std::sqrt(static_cast<double>(k)));
    model.add_slot({p + ".conv.dw", QuantGroup::Conv, i});
    b.constant(p + ".conv.dw_b", d, 0.0);
    b.norm(p + ".conv.norm", d);
    b.quant_matrix(p + ".conv.pw2", d, d, QuantGroup::Conv, i);
    b.constant(p + ".conv.pw2_b", d, 0.0);
    b.ffn(p + ".ffn2", d, ff, QuantGroup::Body, i);
    b.norm(p + ".out_ln", d);
  }
  b.matrix("ctc.w", d, config.classes());
  b.constant("ctc.b", config.classes(), 0.0);

  b.uniform("dec.emb", {config.classes(), d}, std::sqrt(3.0));
  for (std::size_t j = 0; j < config.decoder_layers; ++j) {
    const std::string p = "dec." + std::to_string(j);
    b.attention(p + ".self", d, QuantGroup::Decoder, j);
    b.attention(p + ".src", d, QuantGroup::Decoder, j);
    b.ffn(p + ".ffn", d, ff, QuantGroup::Decoder, j);
  }
  b.norm("dec.out_ln", d);
  b.matrix("dec.out.w", d, config.classes());
  b.constant("dec.out.b", config.classes(), 0.0);
  return model;
}

/// Maps a quantizable slot and its latent tensor to the weight a forward
/// pass should use.
using WeightResolver = std::function<Tensor(const QuantSlot&, const Tensor&)>;

/// Resolver for a precision view of a shared model.
inline WeightResolver view_resolver(const SharedModel& model, const PrecisionAssignment& assignment) {
  assignment.validate(model.config.num_blocks);
  return [&model, assignment](const QuantSlot& slot, const Tensor& latent) -> Tensor {
    const int bits = assignment.bits_for(slot);
    if (bits == 32) return latent;
    const QuantTable table = build_table(bits);
    if (model.scaling == ScalingMode::AbsmeanFixed) {
      return quantize(latent, Tensor::scalar(init_scale(latent.values(), bits)), table);
    }
    const TensorScale* s = model.find_scale(slot.name, bits);
    if (s == nullptr) throw AssignmentError("no " + std::to_string(bits) + "-bit scale for " + slot.name);
    return quantize(latent, s->alpha, table);
  };
}

/// Resolver that ignores quantization entirely.
inline WeightResolver latent_resolver() {
  return [](const QuantSlot&, const Tensor& latent) { return latent; };
}

struct EncoderOutput {
  Tensor hidden;  // [frames' x D]
  Tensor logits;  // [frames' x (V+1)]
  Segments segments;
};

namespace detail {

struct Forward {
  const SharedModel& model;
  const WeightResolver& resolve;

  const Tensor& p(const std::string& name) const { return model.param(name); }
  Tensor w(const std::string& name) const {
    const QuantSlot* slot = model.find_slot(name);
    if (slot == nullptr) throw ContractError("not a quantizable tensor: " + name);
    return resolve(*slot, model.param(name));
  }
  Tensor ln(const Tensor& x, const std::string& prefix) const {
    return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
  }
  Tensor ffn(const Tensor& x, const std::string& pre) const {
    Tensor h = ln(x, pre + ".ln");
    h = swish(linear(h, w(pre + ".w1"), p(pre + ".b1")));
    return linear(h, w(pre + ".w2"), p(pre + ".b2"));
  }
  Tensor attention(const Tensor& x, const Tensor* memory, const std::string& pre, const Segments& q_segs,
                   const Segments& kv_segs, bool causal) const {
    Tensor h = ln(x, pre + ".ln");
    const Tensor& src = memory ? *memory : h;
    Tensor q = linear(h, w(pre + ".wq"), p(pre + ".bq"));
    Tensor k = linear(src, w(pre + ".wk"), p(pre + ".bk"));
    Tensor v = linear(src, w(pre + ".wv"), p(pre + ".bv"));
    Tensor a = multihead_attention(q, k, v, model.config.heads, q_segs, kv_segs, causal);
    return linear(a, w(pre + ".wo"), p(pre + ".bo"));
  }
  Tensor conv(const Tensor& x, const std::string& pre, const Segments& segs) const {
    Tensor h = ln(x, pre + ".ln");
    h = glu(linear(h, w(pre + ".pw1"), p(pre + ".pw1_b")));
    h = add_row_bias(depthwise_conv1d(h, w(pre + ".dw"), segs), p(pre + ".dw_b"));
    h = swish(ln(h, pre + ".norm"));
    return linear(h, w(pre + ".pw2"), p(pre + ".pw2_b"));
  }
};

}  // namespace detail

/// Packed features [frames x F] with per-utterance segments -> CTC logits.
inline EncoderOutput encoder_forward(const SharedModel& model, const Tensor& features, const Segments& segs,
                                     const WeightResolver& resolve) {
  const auto& c = model.config;
  if (features.dim() != 2 || features.cols() != c.feature_dim) {
    throw DimensionError("encoder_forward: expected [frames x " + std::to_string(c.feature_dim) + "] features");
  }
  detail::Forward f{model, resolve};
  EncoderOutput out;
  Tensor x = stack_frames(features, segs, c.subsample, &out.segments);
  x = add(linear(x, f.p("frontend.w"), f.p("frontend.b")), sinusoidal_positions(out.segments, c.model_dim));
  for (std::size_t i = 0; i < c.num_blocks; ++i) {
    const std::string pre = "enc." + std::to_string(i);
    x = add(x, scale(f.ffn(x, pre + ".ffn1"), 0.5));
    x = add(x, f.attention(x, nullptr, pre + ".mhsa", out.segments, out.segments, false));
    x = add(x, f.conv(x, pre + ".conv", out.segments));
    x = add(x, scale(f.ffn(x, pre + ".ffn2"), 0.5));
    x = f.ln(x, pre + ".out_ln");
  }
  out.logits = linear(x, f.p("ctc.w"), f.p("ctc.b"));
  out.hidden = std::move(x);
  return out;
}

inline EncoderOutput encoder_forward(const SharedModel& model, const Tensor& features, const Segments& segs,
                                     const PrecisionAssignment& assignment) {
  return encoder_forward(model, features, segs, view_resolver(model, assignment));
}

/// Decoder input ids: <sos> followed by the transcript, per utterance.
inline std::vector<int> decoder_inputs(const std::vector<std::vector<int>>& targets, std::size_t sos) {
  std::vector<int> ids;
  for (const auto& t : targets) {
    ids.push_back(static_cast<int>(sos));
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return ids;
}

/// Decoder output labels: the transcript followed by <eos>, per utterance.
inline std::vector<int> decoder_labels(const std::vector<std::vector<int>>& targets, std::size_t eos) {
  std::vector<int> ids;
  for (const auto& t : targets) {
    ids.insert(ids.end(), t.begin(), t.end());
    ids.push_back(static_cast<int>(eos));
  }
  return ids;
}

/// Teacher-forced decoder logits, one row per position of
/// decoder_labels(targets): [sum(len + 1) x (V+1)].
inline Tensor decoder_forward(const SharedModel& model, const EncoderOutput& enc,
                              const std::vector<std::vector<int>>& targets, const WeightResolver& resolve) {
  const auto& c = model.config;
  if (targets.size() != enc.segments.count()) throw DimensionError("decoder_forward: one target per utterance");
  std::vector<std::size_t> lengths;
  for (const auto& t : targets) {
    if (t.empty()) throw ContractError("decoder_forward: empty target sequence");
    for (int tok : t) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= c.vocab) throw IndexError("decoder_forward: token out of range");
    }
    lengths.push_back(t.size() + 1);
  }
  const Segments segs = Segments::from_lengths(lengths);
  detail::Forward f{model, resolve};
  Tensor y = add(embedding(f.p("dec.emb"), decoder_inputs(targets, c.eos())), sinusoidal_positions(segs, c.model_dim));
  for (std::size_t j = 0; j < c.decoder_layers; ++j) {
    const std::string pre = "dec." + std::to_string(j);
    y = add(y, f.attention(y, nullptr, pre + ".self", segs, segs, true));
    y = add(y, f.attention(y, &enc.hidden, pre + ".src", segs, enc.segments, false));
    y = add(y, f.ffn(y, pre + ".ffn"));
  }
  y = f.ln(y, "dec.out_ln");
  return linear(y, f.p("dec.out.w"), f.p("dec.out.b"));
}

inline Tensor decoder_forward(const SharedModel& model, const EncoderOutput& enc,
                              const std::vector<std::vector<int>>& targets, const PrecisionAssignment& assignment) {
  return decoder_forward(model, enc, targets, view_resolver(model, assignment));
}

/// (1 - gamma) * att + gamma * ctc, for plain numbers or graph scalars.
template <class T>
T multitask_loss(const T& ctc, const T& att, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("multitask_loss: gamma must lie in [0, 1]");
  return (1.0 - gamma) * att + gamma * ctc;
}

/// A packed minibatch of utterances.
struct Batch {
  Tensor features;  // [frames x F]
  Segments frames;
  std::vector<std::vector<int>> targets;
  std::vector<std::string> ids;
};

/// Everything one precision view produces on a batch.
struct ViewOutput {
  EncoderOutput encoder;
  Tensor decoder_logits;
  Tensor ctc;
  Tensor att;
  Tensor loss;
};

inline ViewOutput forward_view(const SharedModel& model, const Batch& batch, const WeightResolver& resolve) {
  ViewOutput out;
  out.encoder = encoder_forward(model, batch.features, batch.frames, resolve);
  out.decoder_logits = decoder_forward(model, out.encoder, batch.targets, resolve);
  out.ctc = ctc_loss(log_softmax(out.encoder.logits), out.encoder.segments, batch.targets, model.config.blank());
  out.att = cross_entropy_loss(out.decoder_logits, decoder_labels(batch.targets, model.config.eos()));
  out.loss = multitask_loss(out.ctc, out.att, model.config.gamma);
  return out;
}

inline ViewOutput forward_view(const SharedModel& model, const Batch& batch, const PrecisionAssignment& assignment) {
  return forward_view(model, batch, view_resolver(model, assignment));
}

struct TensorCount {
  std::string name;
  std::size_t elements = 0;
  int bits = 32;
};

/// Every latent parameter with its element count and assigned bit-width.
inline std::vector<TensorCount> count_parameters(const SharedModel& model, const PrecisionAssignment& assignment) {
  assignment.validate(model.config.num_blocks);
  std::vector<TensorCount> out;
  for (const auto& p : model.parameters()) {
    const QuantSlot* slot = model.find_slot(p.name);
    out.push_back({p.name, p.tensor.numel(), slot ? assignment.bits_for(*slot) : 32});
  }
  return out;
}

}  // namespace qct
