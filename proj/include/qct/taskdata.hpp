#pragma once

// Synthetic sequence-recognition task. Each token t owns a fixed random
// prototype vector mu_t; an utterance emits `frames_per_token` noisy copies
// of each transcript token's prototype. Transcripts never repeat a token
// back to back, so token boundaries are recoverable from the features.
//
// On-disk layout for a split named <s>:
//   <s>.manifest  one line per utterance: "<id>\t<tok> <tok> ..."
//   <s>.feats     "QCF1", u32 feature_dim, u32 count, then per utterance
//                 u32 frames followed by frames*feature_dim float32 values
//                 (row-major, little-endian), in manifest order.

#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "qct/io.hpp"
#include "qct/tensor.hpp"

namespace qct {

struct SyntheticTaskConfig {
  std::size_t vocab = 20;
  std::size_t frames_per_token = 4;
  std::size_t feature_dim = 16;
  double noise = 0.5;
  double prototype_scale = 0.4;
  std::size_t min_len = 3;
  std::size_t max_len = 10;
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab < 2) throw ConfigError("data: vocab must be at least 2");
    if (frames_per_token < 1 || feature_dim < 1) throw ConfigError("data: frames_per_token and feature_dim >= 1");
    if (!(noise >= 0.0) || !(prototype_scale > 0.0)) throw ConfigError("data: noise >= 0 and prototype_scale > 0");
    if (min_len < 1 || min_len > max_len) throw ConfigError("data: need 1 <= min_len <= max_len");
  }
};

struct Utterance {
  std::string id;
  Tensor features;  // [frames x feature_dim]
  std::vector<int> transcript;

  std::size_t frames() const { return features.rows(); }
};

using Dataset = std::vector<Utterance>;

struct TaskData {
  std::vector<std::vector<double>> prototypes;  // [vocab][feature_dim]
  Dataset train;
  Dataset dev;
  Dataset test;
};

namespace detail {

inline std::mt19937_64 substream(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

inline Dataset generate_split(const SyntheticTaskConfig& c, const std::vector<std::vector<double>>& protos,
                              const std::string& name, std::size_t count, std::uint32_t stream) {
  auto rng = substream(c.seed, stream);
  std::uniform_int_distribution<std::size_t> len_dist(c.min_len, c.max_len);
  std::uniform_int_distribution<int> first_tok(0, static_cast<int>(c.vocab) - 1);
  std::uniform_int_distribution<int> next_tok(0, static_cast<int>(c.vocab) - 2);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset out;
  out.reserve(count);
  for (std::size_t u = 0; u < count; ++u) {
    Utterance utt;
    std::ostringstream id;
    id << name << '-' << std::setw(6) << std::setfill('0') << u;
    utt.id = id.str();
    const std::size_t len = len_dist(rng);
    for (std::size_t i = 0; i < len; ++i) {
      int tok = i == 0 ? first_tok(rng) : next_tok(rng);
      if (i > 0 && tok >= utt.transcript.back()) ++tok;
      utt.transcript.push_back(tok);
    }
    const std::size_t frames = len * c.frames_per_token;
    std::vector<double> feats(frames * c.feature_dim);
    for (std::size_t t = 0; t < frames; ++t) {
      const auto& mu = protos[utt.transcript[t / c.frames_per_token]];
      for (std::size_t j = 0; j < c.feature_dim; ++j) {
        // Stored as float32 on disk; keep the in-memory copy identical.
        feats[t * c.feature_dim + j] = static_cast<float>(mu[j] + c.noise * noise(rng));
      }
    }
    utt.features = Tensor(Shape{frames, c.feature_dim}, std::move(feats));
    out.push_back(std::move(utt));
  }
  return out;
}

}  // namespace detail

inline std::vector<std::vector<double>> generate_prototypes(const SyntheticTaskConfig& c) {
  auto rng = detail::substream(c.seed, 0);
  std::normal_distribution<double> dist(0.0, c.prototype_scale);
  std::vector<std::vector<double>> protos(c.vocab, std::vector<double>(c.feature_dim));
  for (auto& p : protos)
    for (double& x : p) x = dist(rng);
  return protos;
}

inline TaskData generate_dataset(const SyntheticTaskConfig& config) {
  config.validate();
  TaskData data;
  data.prototypes = generate_prototypes(config);
  data.train = detail::generate_split(config, data.prototypes, "train", config.train, 1);
  data.dev = detail::generate_split(config, data.prototypes, "dev", config.dev, 2);
  data.test = detail::generate_split(config, data.prototypes, "test", config.test, 3);
  return data;
}

inline std::string format_transcript(const std::vector<int>& tokens) {
  std::ostringstream os;
  for (std::size_t i = 0; i < tokens.size(); ++i) os << (i ? " " : "") << tokens[i];
  return os.str();
}

inline void write_split(const std::filesystem::path& dir, const std::string& name, const Dataset& data) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  ByteWriter feats;
  feats.put_raw("QCF1");
  const std::uint32_t dim = data.empty() ? 0 : static_cast<std::uint32_t>(data.front().features.cols());
  feats.put<std::uint32_t>(dim);
  feats.put<std::uint32_t>(static_cast<std::uint32_t>(data.size()));
  for (const auto& u : data) {
    manifest << u.id << '\t' << format_transcript(u.transcript) << '\n';
    feats.put<std::uint32_t>(static_cast<std::uint32_t>(u.frames()));
    for (double v : u.features.values()) feats.put<float>(static_cast<float>(v));
  }
  write_text_file(dir / (name + ".manifest"), manifest.str());
  write_file(dir / (name + ".feats"), feats.bytes());
}

inline Dataset read_split(const std::filesystem::path& dir, const std::string& name) {
  const std::string manifest = read_text_file(dir / (name + ".manifest"));
  const auto bytes = read_file(dir / (name + ".feats"));
  ByteReader r(bytes);
  if (r.get_raw(4) != "QCF1") throw FormatError(name + ".feats: bad magic");
  const std::size_t dim = r.get<std::uint32_t>();
  const std::size_t count = r.get<std::uint32_t>();
  Dataset out;
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(name + ".manifest: missing tab");
    Utterance u;
    u.id = line.substr(0, tab);
    std::istringstream toks(line.substr(tab + 1));
    int t;
    while (toks >> t) u.transcript.push_back(t);
    const std::size_t frames = r.get<std::uint32_t>();
    if (frames == 0 || dim == 0) throw FormatError(name + ".feats: empty utterance");
    std::vector<double> v(frames * dim);
    for (double& x : v) x = r.get<float>();
    u.features = Tensor(Shape{frames, dim}, std::move(v));
    out.push_back(std::move(u));
  }
  if (out.size() != count) throw FormatError(name + ": manifest and feature counts differ");
  if (r.remaining() != 0) throw FormatError(name + ".feats: trailing bytes");
  return out;
}

inline void write_dataset(const std::filesystem::path& dir, const TaskData& data) {
  write_split(dir, "train", data.train);
  write_split(dir, "dev", data.dev);
  write_split(dir, "test", data.test);
}

}  // namespace qct
