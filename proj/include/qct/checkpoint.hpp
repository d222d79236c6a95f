#pragma once

// Latent checkpoint: full double-precision parameters and every scale.
//
//   "QCK1" u16 version, str model config echo, u8 scaling, u64 step,
//   u32 parameter count, per parameter: str name, u32 numel, f64 values,
//   u32 scale count, per scale: str owner, i32 bits, f64 alpha,
//   u32 CRC-32.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qct/config.hpp"
#include "qct/io.hpp"
#include "qct/model.hpp"

namespace qct {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  SharedModel model;
  std::uint64_t step = 0;
};

inline std::vector<std::uint8_t> save_checkpoint(const SharedModel& model, std::uint64_t step = 0) {
  ByteWriter w;
  w.put_raw("QCK1");
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put_string(model_config_text(model.config));
  w.put<std::uint8_t>(model.scaling == ScalingMode::Learned ? 0 : 1);
  w.put<std::uint64_t>(step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.numel()));
    for (double v : p.tensor.values()) w.put<double>(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.scales().size()));
  for (const auto& [key, s] : model.scales()) {
    w.put_string(s.owner);
    w.put<std::int32_t>(s.bits);
    w.put<double>(s.value());
  }
  w.seal();
  return w.take();
}

inline Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || std::string(bytes.begin(), bytes.begin() + 4) != "QCK1") {
    throw FormatError("not a checkpoint (bad magic)");
  }
  ByteReader r(verify_sealed(bytes));
  r.get_raw(4);
  if (r.get<std::uint16_t>() != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  ModelConfig config;
  try {
    config = parse_model_config(r.get_string());
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo: ") + e.what());
  }
  const auto scaling = r.get<std::uint8_t>() == 0 ? ScalingMode::Learned : ScalingMode::AbsmeanFixed;
  Checkpoint ck{build_model(config, scaling), r.get<std::uint64_t>()};
  const std::size_t n = r.get<std::uint32_t>();
  if (n != ck.model.parameters().size()) throw FormatError("checkpoint: parameter count does not match config");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    if (!ck.model.has_param(name)) throw FormatError("checkpoint: unknown parameter " + name);
    auto values = ck.model.param(name).mutable_values();
    if (r.get<std::uint32_t>() != values.size()) throw FormatError("checkpoint: size mismatch for " + name);
    for (double& v : values) v = r.get<double>();
  }
  const std::size_t scales = r.get<std::uint32_t>();
  for (std::size_t i = 0; i < scales; ++i) {
    const std::string owner = r.get_string();
    const int bits = r.get<std::int32_t>();
    const double alpha = r.get<double>();
    if (!supported_bits(bits) || !ck.model.find_slot(owner)) throw FormatError("checkpoint: bad scale entry");
    ck.model.set_scale(owner, bits, alpha);
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

}  // namespace qct
