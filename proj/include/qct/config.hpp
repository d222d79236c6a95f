#pragma once

// Run configuration file grammar:
//
//   file     := { line }
//   line     := blank | comment | section | entry
//   comment  := ('#' | ';') any-text
//   section  := '[' name ']'            name in {model, train, data, run}
//   entry    := key '=' value           whitespace around key/value ignored
//
// Entries before the first section header are rejected. Unknown sections
// or keys are configuration errors. Booleans accept true/false/1/0/on/off.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qct/cotrain.hpp"
#include "qct/model.hpp"
#include "qct/taskdata.hpp"

namespace qct {

using ConfigSections = std::map<std::string, std::vector<std::pair<std::string, std::string>>>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline ConfigSections parse_config_text(const std::string& text) {
  ConfigSections out;
  std::istringstream in(text);
  std::string raw, section;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      out[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": entry outside any section");
    out[section].emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Float: return "float";
    case TrainMode::Qat: return "qat";
    case TrainMode::Cotrain: return "cotrain";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "float") return TrainMode::Float;
  if (s == "qat") return TrainMode::Qat;
  if (s == "cotrain") return TrainMode::Cotrain;
  throw ConfigError("unknown mode '" + s + "' (float|qat|cotrain)");
}

inline std::string scaling_name(ScalingMode m) { return m == ScalingMode::Learned ? "learned" : "absmean-fixed"; }

inline ScalingMode parse_scaling(const std::string& s) {
  if (s == "learned") return ScalingMode::Learned;
  if (s == "absmean-fixed") return ScalingMode::AbsmeanFixed;
  throw ConfigError("unknown scaling '" + s + "' (learned|absmean-fixed)");
}

inline void set_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "blocks") c.num_blocks = to_size(key, v);
  else if (key == "dim") c.model_dim = to_size(key, v);
  else if (key == "ffn_dim") c.ffn_dim = to_size(key, v);
  else if (key == "heads") c.heads = to_size(key, v);
  else if (key == "conv_kernel") c.conv_kernel = to_size(key, v);
  else if (key == "vocab") c.vocab = to_size(key, v);
  else if (key == "feature_dim") c.feature_dim = to_size(key, v);
  else if (key == "decoder_layers") c.decoder_layers = to_size(key, v);
  else if (key == "subsample") c.subsample = to_size(key, v);
  else if (key == "gamma") c.gamma = to_double(key, v);
  else if (key == "seed") c.seed = to_u64(key, v);
  else throw ConfigError("unknown [model] key '" + key + "'");
}

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "[model]\n"
     << "blocks = " << c.num_blocks << "\n"
     << "dim = " << c.model_dim << "\n"
     << "ffn_dim = " << c.ffn_dim << "\n"
     << "heads = " << c.heads << "\n"
     << "conv_kernel = " << c.conv_kernel << "\n"
     << "vocab = " << c.vocab << "\n"
     << "feature_dim = " << c.feature_dim << "\n"
     << "decoder_layers = " << c.decoder_layers << "\n"
     << "subsample = " << c.subsample << "\n"
     << "gamma = " << detail::fmt(c.gamma) << "\n"
     << "seed = " << c.seed << "\n";
  return os.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  auto sections = parse_config_text(text);
  for (const auto& [k, v] : sections["model"]) set_model_key(c, k, v);
  return c;
}

inline void set_train_key(CoTrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "mode") c.mode = parse_mode(v);
  else if (key == "bits") c.bits = to_int(key, v);
  else if (key == "cnn_bits") c.cnn_bits = to_int(key, v);
  else if (key == "decoder_bits") c.decoder_bits = to_int(key, v);
  else if (key == "scaling") c.scaling = parse_scaling(v);
  else if (key == "lambda1") c.lambda1 = to_double(key, v);
  else if (key == "lambda2") c.lambda2 = to_double(key, v);
  else if (key == "p_min") c.p_min = to_double(key, v);
  else if (key == "p_max") c.p_max = to_double(key, v);
  else if (key == "kl") c.enable_kl = to_bool(key, v);
  else if (key == "sp") c.enable_sp = to_bool(key, v);
  else if (key == "lr") c.peak_lr = to_double(key, v);
  else if (key == "warmup") c.warmup_steps = static_cast<long>(to_size(key, v));
  else if (key == "clip_norm") c.clip_norm = to_double(key, v);
  else if (key == "epochs") c.epochs = to_size(key, v);
  else if (key == "batch_size") c.batch_size = to_size(key, v);
  else throw ConfigError("unknown [train] key '" + key + "'");
}

inline void set_data_key(SyntheticTaskConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "vocab") c.vocab = to_size(key, v);
  else if (key == "frames_per_token") c.frames_per_token = to_size(key, v);
  else if (key == "feature_dim") c.feature_dim = to_size(key, v);
  else if (key == "noise") c.noise = to_double(key, v);
  else if (key == "prototype_scale") c.prototype_scale = to_double(key, v);
  else if (key == "min_len") c.min_len = to_size(key, v);
  else if (key == "max_len") c.max_len = to_size(key, v);
  else if (key == "train") c.train = to_size(key, v);
  else if (key == "dev") c.dev = to_size(key, v);
  else if (key == "test") c.test = to_size(key, v);
  else if (key == "seed") c.seed = to_u64(key, v);
  else throw ConfigError("unknown [data] key '" + key + "'");
}

/// Fully resolved settings for one run.
struct RunConfig {
  ModelConfig model;
  CoTrainConfig train;
  SyntheticTaskConfig data;
  std::string data_dir = "data";
  std::string run_dir = "run";
  std::uint64_t seed = 1;  // model init, batch order and precision sampling

  void set(const std::string& section, const std::string& key, const std::string& value) {
    if (section == "model") {
      if (key == "vocab" || key == "feature_dim" || key == "seed") {
        throw ConfigError("[model] " + key + " is derived; set it under [data] or [run]");
      }
      set_model_key(model, key, value);
    } else if (section == "train") {
      set_train_key(train, key, value);
    } else if (section == "data") {
      set_data_key(data, key, value);
    } else if (section == "run") {
      if (key == "seed") seed = detail::to_u64(key, value);
      else if (key == "data_dir") data_dir = value;
      else if (key == "run_dir") run_dir = value;
      else throw ConfigError("unknown [run] key '" + key + "'");
    } else {
      throw ConfigError("unknown section [" + section + "]");
    }
  }

  /// "section.key=value" override.
  void apply_override(const std::string& item) {
    const auto dot = item.find('.');
    const auto eq = item.find('=');
    if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
      throw ConfigError("override must look like section.key=value: " + item);
    }
    set(item.substr(0, dot), detail::trim(item.substr(dot + 1, eq - dot - 1)), detail::trim(item.substr(eq + 1)));
  }

  void load_text(const std::string& text) {
    for (const auto& [section, entries] : parse_config_text(text))
      for (const auto& [k, v] : entries) set(section, k, v);
  }

  /// Propagates shared settings and validates everything.
  void resolve() {
    model.vocab = data.vocab;
    model.feature_dim = data.feature_dim;
    model.seed = seed;
    train.seed = seed;
    model.validate();
    train.validate();
    data.validate();
    // Each token must keep at least one frame after subsampling for CTC to
    // stay feasible (consecutive tokens never repeat).
    if (data.frames_per_token < model.subsample) {
      throw ConfigError("frames_per_token must be at least the subsampling factor");
    }
  }

  std::string to_text() const {
    using detail::fmt;
    std::ostringstream os;
    os << model_config_text(model);
    os << "\n[train]\n"
       << "mode = " << mode_name(train.mode) << "\n"
       << "bits = " << train.bits << "\n"
       << "cnn_bits = " << train.cnn_bits << "\n"
       << "decoder_bits = " << train.decoder_bits << "\n"
       << "scaling = " << scaling_name(train.scaling) << "\n"
       << "lambda1 = " << fmt(train.lambda1) << "\n"
       << "lambda2 = " << fmt(train.lambda2) << "\n"
       << "p_min = " << fmt(train.p_min) << "\n"
       << "p_max = " << fmt(train.p_max) << "\n"
       << "kl = " << (train.enable_kl ? "true" : "false") << "\n"
       << "sp = " << (train.enable_sp ? "true" : "false") << "\n"
       << "lr = " << fmt(train.peak_lr) << "\n"
       << "warmup = " << train.warmup_steps << "\n"
       << "clip_norm = " << fmt(train.clip_norm) << "\n"
       << "epochs = " << train.epochs << "\n"
       << "batch_size = " << train.batch_size << "\n";
    os << "\n[data]\n"
       << "vocab = " << data.vocab << "\n"
       << "frames_per_token = " << data.frames_per_token << "\n"
       << "feature_dim = " << data.feature_dim << "\n"
       << "noise = " << fmt(data.noise) << "\n"
       << "prototype_scale = " << fmt(data.prototype_scale) << "\n"
       << "min_len = " << data.min_len << "\n"
       << "max_len = " << data.max_len << "\n"
       << "train = " << data.train << "\n"
       << "dev = " << data.dev << "\n"
       << "test = " << data.test << "\n"
       << "seed = " << data.seed << "\n";
    os << "\n[run]\n"
       << "seed = " << seed << "\n"
       << "data_dir = " << data_dir << "\n"
       << "run_dir = " << run_dir << "\n";
    return os.str();
  }
};

/// Parses a full resolved echo (as written by RunConfig::to_text).
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  for (const auto& [section, entries] : parse_config_text(text)) {
    for (const auto& [k, v] : entries) {
      if (section == "model" && (k == "vocab" || k == "feature_dim" || k == "seed")) continue;
      rc.set(section, k, v);
    }
  }
  rc.resolve();
  return rc;
}

}  // namespace qct
