#pragma once

// Batching, dev/test evaluation and the epoch loop.
//
// Training log lines:
//   <step> TAB l_int2=.. l_int1=.. l_sp=.. omega_int1=.. omega_sp=.. total=.. TAB <lr>
//   epoch TAB <n> TAB <view> TAB wer=.. TAB token_acc=..

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qct/config.hpp"
#include "qct/cotrain.hpp"
#include "qct/eval.hpp"
#include "qct/model.hpp"
#include "qct/taskdata.hpp"

namespace qct {

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: no utterances");
  Batch b;
  std::vector<std::size_t> lengths;
  std::size_t dim = data.at(indices.front()).features.cols();
  std::vector<double> feats;
  for (std::size_t i : indices) {
    const Utterance& u = data.at(i);
    if (u.features.cols() != dim) throw DimensionError("make_batch: feature dimension differs across utterances");
    lengths.push_back(u.frames());
    feats.insert(feats.end(), u.features.values().begin(), u.features.values().end());
    b.targets.push_back(u.transcript);
    b.ids.push_back(u.id);
  }
  b.frames = Segments::from_lengths(lengths);
  b.features = Tensor(Shape{b.frames.total(), dim}, std::move(feats));
  return b;
}

/// A named precision view of a trained model.
struct NamedView {
  std::string name;
  PrecisionAssignment assignment;
};

/// "float", "int<n>" or "half" (ceil(L/2) random layers binarized, the
/// rest at 2 bits; drawn from `seed`).
inline NamedView parse_view(const std::string& name, std::size_t blocks, int cnn_bits, int decoder_bits,
                            std::uint64_t seed = 1) {
  if (name == "float") return {name, PrecisionAssignment::full_precision(blocks)};
  if (name == "half") {
    std::mt19937_64 rng(seed);
    return {name, sample_half_binary(PrecisionAssignment::uniform(blocks, 2, cnn_bits, decoder_bits), rng)};
  }
  if (name.rfind("int", 0) == 0) {
    int bits = 0;
    try {
      bits = std::stoi(name.substr(3));
    } catch (const std::exception&) {
      throw ConfigError("unknown view '" + name + "'");
    }
    if (!supported_bits(bits) || name != "int" + std::to_string(bits)) throw ConfigError("unknown view '" + name + "'");
    return {name, PrecisionAssignment::uniform(blocks, bits, cnn_bits, decoder_bits)};
  }
  throw ConfigError("unknown view '" + name + "' (float|int1|int2|int4|int8|half)");
}

/// Views a training configuration produces.
inline std::vector<NamedView> trained_views(const CoTrainConfig& cfg, std::size_t blocks) {
  const ViewPlan plan = plan_views(cfg, blocks);
  switch (cfg.mode) {
    case TrainMode::Float: return {{"float", plan.primary}};
    case TrainMode::Qat: return {{"int" + std::to_string(cfg.bits), plan.primary}};
    case TrainMode::Cotrain: return {{"int2", plan.primary}, {"int1", plan.low}};
  }
  return {};
}

struct EvalResult {
  std::vector<DecodeResult> decodes;
  WerReport report;
  std::size_t token_correct = 0;
  std::size_t token_total = 0;

  double wer() const { return report.wer(); }
  double token_accuracy() const {
    return token_total == 0 ? 0.0 : static_cast<double>(token_correct) / static_cast<double>(token_total);
  }
};

/// Greedy CTC decoding plus teacher-forced decoder token accuracy.
inline EvalResult evaluate(const SharedModel& model, const Dataset& data, const WeightResolver& resolve,
                           std::size_t batch_size = 32) {
  NoGradGuard no_grad;
  EvalResult r;
  const std::size_t classes = model.config.classes();
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(data, idx);
    const EncoderOutput enc = encoder_forward(model, b.features, b.frames, resolve);
    auto logits = enc.logits.values();
    for (std::size_t u = 0; u < b.ids.size(); ++u) {
      const std::size_t rows = enc.segments.length(u);
      const auto first = logits.begin() + static_cast<std::ptrdiff_t>(enc.segments.begin(u) * classes);
      Tensor utt(Shape{rows, classes}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * classes)));
      r.decodes.push_back({b.ids[u], greedy_ctc_decode(utt, model.config.blank()), b.targets[u]});
    }
    const Tensor dec = decoder_forward(model, enc, b.targets, resolve);
    const auto labels = decoder_labels(b.targets, model.config.eos());
    auto dv = dec.values();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = dv.subspan(i * classes, classes);
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      r.token_correct += arg == labels[i];
    }
    r.token_total += labels.size();
  }
  r.report = score(r.decodes);
  return r;
}

inline EvalResult evaluate(const SharedModel& model, const Dataset& data, const PrecisionAssignment& assignment,
                           std::size_t batch_size = 32) {
  return evaluate(model, data, view_resolver(model, assignment), batch_size);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string view;
  double wer = 0.0;
  double token_accuracy = 0.0;
};

struct TrainResult {
  SharedModel model;
  TrainState state;
  std::vector<EpochMetrics> history;
};

inline void log_step(std::ostream& os, const TrainState& s) {
  const auto& l = s.last;
  os << s.step << '\t' << std::setprecision(6) << "l_int2=" << l.l_int2 << " l_int1=" << l.l_int1
     << " l_sp=" << l.l_sp << " omega_int1=" << l.omega_int1 << " omega_sp=" << l.omega_sp << " total=" << l.total
     << '\t' << s.last_lr << '\n';
}

/// Runs the configured training. `log` receives step and epoch lines; dev
/// metrics are computed at the end of every epoch when `dev` is non-empty.
inline TrainResult train_model(const RunConfig& rc, const Dataset& train, const Dataset& dev, std::ostream* log) {
  if (train.empty()) throw ContractError("train_model: empty training set");
  const CoTrainConfig& cfg = rc.train;
  TrainResult r{build_model(rc.model, cfg.scaling), TrainState(rc.seed * 0x9e3779b97f4a7c15ULL + 1), {}};
  prepare_model(r.model, cfg);
  const auto views = trained_views(cfg, rc.model.num_blocks);
  std::mt19937_64 order_rng(rc.seed + 0x5bd1e995ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const Batch batch = make_batch(train, std::span(order).subspan(start, n));
      train_step(r.model, batch, cfg, r.state);
      if (log) log_step(*log, r.state);
    }
    r.state.epoch = epoch;
    if (dev.empty()) continue;
    for (const auto& v : views) {
      const EvalResult e = evaluate(r.model, dev, v.assignment);
      r.history.push_back({epoch, v.name, e.wer(), e.token_accuracy()});
      if (log) {
        *log << "epoch\t" << epoch << '\t' << v.name << '\t' << std::fixed << std::setprecision(2)
             << "wer=" << e.wer() << '\t' << std::setprecision(4) << "token_acc=" << e.token_accuracy() << '\n';
        log->unsetf(std::ios::fixed);
        log->flush();
      }
    }
  }
  return r;
}

}  // namespace qct
