#pragma once

// Bit packing of quantized tensors and the model archive.
//
// Packed payload: n-bit level indices in element order, MSB-first within
// each byte, final byte zero-padded. Index i refers to the i-th entry of
// the ascending level table (so -1 -> 0 and +1 -> 1 at one bit).
//
// Archive layout (all integers little-endian):
//   "QCT1"  u16 version
//   u64     latent content hash
//   str     view label                     (str = u32 length + bytes)
//   str     model config echo
//   u8      scaling mode (0 learned, 1 absmean-fixed)
//   u32     number of scales
//   u32     number of tensors
//   per tensor, sorted by name:
//     str name, u8 bits, u8 ndim, u32 dims[ndim]
//     bits == 32: f32 values[numel]
//     otherwise:  f32 alpha, u32 payload bytes, payload
//   u32     CRC-32 of everything above

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qct/config.hpp"
#include "qct/io.hpp"
#include "qct/model.hpp"
#include "qct/quantizer.hpp"

namespace qct {

inline constexpr std::uint16_t kArchiveVersion = 1;

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline std::vector<std::uint8_t> pack(std::span<const std::uint32_t> indices, int bits) {
  if (bits < 1 || bits > 8) throw ContractError("pack: bit-width must be in 1..8");
  const std::uint32_t limit = 1u << bits;
  std::vector<std::uint8_t> out(packed_size(indices.size(), bits), 0);
  std::size_t bit = 0;
  for (std::uint32_t idx : indices) {
    if (idx >= limit) throw ContractError("pack: index " + std::to_string(idx) + " does not fit in " +
                                          std::to_string(bits) + " bits");
    for (int b = bits - 1; b >= 0; --b, ++bit) {
      if ((idx >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(0x80u >> (bit % 8));
    }
  }
  return out;
}

inline std::vector<std::uint32_t> unpack(std::span<const std::uint8_t> payload, int bits, std::size_t count) {
  if (bits < 1 || bits > 8) throw ContractError("unpack: bit-width must be in 1..8");
  if (payload.size() != packed_size(count, bits)) {
    throw FormatError("unpack: payload has " + std::to_string(payload.size()) + " bytes, expected " +
                      std::to_string(packed_size(count, bits)));
  }
  std::vector<std::uint32_t> out(count, 0);
  std::size_t bit = 0;
  for (auto& idx : out) {
    for (int b = 0; b < bits; ++b, ++bit) idx = (idx << 1) | ((payload[bit / 8] >> (7 - bit % 8)) & 1u);
  }
  return out;
}

inline std::vector<std::uint32_t> levels_to_indices(std::span<const int> levels, const QuantTable& table) {
  std::vector<std::uint32_t> out(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const int l = levels[i];
    if (std::find(table.levels.begin(), table.levels.end(), l) == table.levels.end()) {
      throw ContractError("level " + std::to_string(l) + " not in the " + std::to_string(table.bits) + "-bit table");
    }
    out[i] = static_cast<std::uint32_t>(table.index_of(l));
  }
  return out;
}

inline std::vector<int> indices_to_levels(std::span<const std::uint32_t> indices, const QuantTable& table) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= table.size()) throw FormatError("level index out of range for the table");
    out[i] = table.level_at(indices[i]);
  }
  return out;
}

inline std::vector<std::uint8_t> pack_levels(std::span<const int> levels, int bits) {
  const QuantTable table = build_table(bits);
  return pack(levels_to_indices(levels, table), bits);
}

inline std::vector<int> unpack_levels(std::span<const std::uint8_t> payload, int bits, std::size_t count) {
  return indices_to_levels(unpack(payload, bits, count), build_table(bits));
}

/// FNV-1a over the latent parameters (names and values, sorted by name).
/// Scales are excluded, so every view of one model shares the hash.
inline std::uint64_t latent_hash(const SharedModel& model) {
  std::vector<const Parameter*> sorted;
  for (const auto& p : model.parameters()) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });
  Fnv1a h;
  for (const auto* p : sorted) {
    h.update_string(p->name);
    for (std::size_t d : p->tensor.shape()) h.update_value<std::uint64_t>(d);
    for (double v : p->tensor.values()) h.update_value(v);
  }
  return h.digest();
}

/// The scale a view uses for a quantized tensor.
inline double effective_scale(const SharedModel& model, const QuantSlot& slot, int bits) {
  if (model.scaling == ScalingMode::AbsmeanFixed) return init_scale(model.param(slot.name).values(), bits);
  const TensorScale* s = model.find_scale(slot.name, bits);
  if (s == nullptr) throw AssignmentError("no " + std::to_string(bits) + "-bit scale for " + slot.name);
  return s->value();
}

struct PackedTensor {
  std::string name;
  int bits = 32;
  Shape shape;
  float alpha = 0.0f;
  std::vector<std::uint8_t> payload;  // quantized tensors
  std::vector<float> raw;             // full-precision tensors

  std::size_t numel() const { return shape_numel(shape); }

  std::vector<double> dequantize() const {
    std::vector<double> out(numel());
    if (bits == 32) {
      std::copy(raw.begin(), raw.end(), out.begin());
      return out;
    }
    const auto levels = unpack_levels(payload, bits, numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(alpha) * levels[i];
    return out;
  }
};

struct ModelArchive {
  std::uint64_t latent_hash = 0;
  std::string view;
  ModelConfig config;
  ScalingMode scaling = ScalingMode::Learned;
  std::size_t scale_count = 0;
  std::vector<PackedTensor> tensors;  // sorted by name
};

/// Quantizes and packs every tensor of a view. Codes are computed with the
/// model's own scale; the stored scale is its float32 rounding.
inline ModelArchive build_archive(const SharedModel& model, const PrecisionAssignment& assignment,
                                  const std::string& view) {
  assignment.validate(model.config.num_blocks);
  ModelArchive a;
  a.latent_hash = latent_hash(model);
  a.view = view;
  a.config = model.config;
  a.scaling = model.scaling;
  for (const auto& p : model.parameters()) {
    PackedTensor t;
    t.name = p.name;
    t.shape = p.tensor.shape();
    const QuantSlot* slot = model.find_slot(p.name);
    t.bits = slot ? assignment.bits_for(*slot) : 32;
    if (t.bits == 32) {
      t.raw.assign(p.tensor.values().begin(), p.tensor.values().end());
    } else {
      const QuantTable table = build_table(t.bits);
      const double alpha = effective_scale(model, *slot, t.bits);
      t.alpha = static_cast<float>(alpha);
      const auto codes = quantize_codes(p.tensor.values(), alpha, table);
      t.payload = pack(levels_to_indices(codes, table), t.bits);
      ++a.scale_count;
    }
    a.tensors.push_back(std::move(t));
  }
  std::sort(a.tensors.begin(), a.tensors.end(), [](const auto& x, const auto& y) { return x.name < y.name; });
  return a;
}

inline std::vector<std::uint8_t> serialize_archive(const ModelArchive& a) {
  ByteWriter w;
  w.put_raw("QCT1");
  w.put<std::uint16_t>(kArchiveVersion);
  w.put<std::uint64_t>(a.latent_hash);
  w.put_string(a.view);
  w.put_string(model_config_text(a.config));
  w.put<std::uint8_t>(a.scaling == ScalingMode::Learned ? 0 : 1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.scale_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) {
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.bits));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (t.bits == 32) {
      for (float v : t.raw) w.put<float>(v);
    } else {
      w.put<float>(t.alpha);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(t.payload.size()));
      w.put_bytes(t.payload);
    }
  }
  w.seal();
  return w.take();
}

inline std::vector<std::uint8_t> write_archive(const SharedModel& model, const PrecisionAssignment& assignment,
                                               const std::string& view) {
  return serialize_archive(build_archive(model, assignment, view));
}

inline ModelArchive read_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || std::string(bytes.begin(), bytes.begin() + 4) != "QCT1") {
    throw FormatError("not a model archive (bad magic)");
  }
  ByteReader r(verify_sealed(bytes));
  r.get_raw(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kArchiveVersion) throw FormatError("unsupported archive version " + std::to_string(version));
  ModelArchive a;
  a.latent_hash = r.get<std::uint64_t>();
  a.view = r.get_string();
  try {
    a.config = parse_model_config(r.get_string());
    a.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("archive config echo: ") + e.what());
  }
  const auto scaling = r.get<std::uint8_t>();
  if (scaling > 1) throw FormatError("archive: bad scaling mode");
  a.scaling = scaling == 0 ? ScalingMode::Learned : ScalingMode::AbsmeanFixed;
  a.scale_count = r.get<std::uint32_t>();
  const std::size_t count = r.get<std::uint32_t>();
  std::size_t quantized = 0;
  for (std::size_t i = 0; i < count; ++i) {
    PackedTensor t;
    t.name = r.get_string();
    t.bits = r.get<std::uint8_t>();
    if (t.bits != 32 && !supported_bits(t.bits)) throw FormatError("archive: bad bit-width for " + t.name);
    const std::size_t ndim = r.get<std::uint8_t>();
    for (std::size_t d = 0; d < ndim; ++d) t.shape.push_back(r.get<std::uint32_t>());
    if (ndim == 0 || shape_numel(t.shape) == 0) throw FormatError("archive: empty tensor " + t.name);
    if (t.bits == 32) {
      t.raw.resize(t.numel());
      for (float& v : t.raw) v = r.get<float>();
    } else {
      t.alpha = r.get<float>();
      if (!(t.alpha > 0.0f)) throw FormatError("archive: non-positive scale for " + t.name);
      const std::size_t len = r.get<std::uint32_t>();
      auto payload = r.get_bytes(len);
      t.payload.assign(payload.begin(), payload.end());
      indices_to_levels(unpack(t.payload, t.bits, t.numel()), build_table(t.bits));
      ++quantized;
    }
    if (!a.tensors.empty() && !(a.tensors.back().name < t.name)) throw FormatError("archive: tensors out of order");
    a.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("archive: trailing bytes");
  if (quantized != a.scale_count) throw FormatError("archive: scale count mismatch");
  return a;
}

/// A view loaded for inference: a model whose latent parameters hold the
/// dequantized weights, to be run with latent_resolver().
struct LoadedModel {
  SharedModel model;
  PrecisionAssignment assignment;
  std::string view;
  std::uint64_t latent_hash = 0;
};

inline LoadedModel load_archive(const ModelArchive& a) {
  LoadedModel out;
  out.model = build_model(a.config, a.scaling);
  out.view = a.view;
  out.latent_hash = a.latent_hash;
  out.assignment = PrecisionAssignment::full_precision(a.config.num_blocks);
  if (a.tensors.size() != out.model.parameters().size()) throw FormatError("archive: tensor set does not match config");
  for (const auto& t : a.tensors) {
    if (!out.model.has_param(t.name)) throw FormatError("archive: unknown tensor " + t.name);
    Tensor& p = out.model.param(t.name);
    if (p.shape() != t.shape) throw FormatError("archive: shape mismatch for " + t.name);
    const auto values = t.dequantize();
    std::copy(values.begin(), values.end(), p.mutable_values().begin());
    const QuantSlot* slot = out.model.find_slot(t.name);
    if (slot == nullptr) {
      if (t.bits != 32) throw FormatError("archive: " + t.name + " cannot be quantized");
      continue;
    }
    auto& a_bits = out.assignment;
    int* target = nullptr;
    switch (slot->group) {
      case QuantGroup::Body: target = &a_bits.encoder_bits.at(slot->block); break;
      case QuantGroup::Conv: target = &a_bits.conv_bits.at(slot->block); break;
      case QuantGroup::Decoder: target = &a_bits.decoder_bits; break;
    }
    if (*target != 32 && *target != t.bits) throw FormatError("archive: inconsistent bit-widths in one group");
    *target = t.bits;
  }
  return out;
}

/// The same weights load_archive would produce, without going through bytes.
inline LoadedModel materialize(const SharedModel& model, const PrecisionAssignment& assignment,
                               const std::string& view = "") {
  return load_archive(build_archive(model, assignment, view));
}

struct TensorSize {
  std::string name;
  std::size_t elements = 0;
  int bits = 32;
  std::size_t float_bytes = 0;
  std::size_t packed_bytes = 0;
};

/// Parameter storage only: no headers, names or scales on either side.
struct CompressionReport {
  std::vector<TensorSize> tensors;
  std::size_t float_bytes = 0;
  std::size_t packed_bytes = 0;
  std::size_t extra_quant_params = 0;
  double ratio = 1.0;
};

inline double compression_ratio(double float_bytes, double packed_bytes) {
  if (!(packed_bytes > 0.0)) throw ContractError("compression_ratio: packed size must be positive");
  if (!(float_bytes > 0.0)) throw ContractError("compression_ratio: float size must be positive");
  return float_bytes / packed_bytes;
}

inline CompressionReport compression_report(const SharedModel& model, const PrecisionAssignment& assignment) {
  CompressionReport r;
  for (const auto& c : count_parameters(model, assignment)) {
    TensorSize t{c.name, c.elements, c.bits, 4 * c.elements, c.bits == 32 ? 4 * c.elements : packed_size(c.elements, c.bits)};
    r.float_bytes += t.float_bytes;
    r.packed_bytes += t.packed_bytes;
    if (c.bits != 32) ++r.extra_quant_params;
    r.tensors.push_back(std::move(t));
  }
  r.ratio = compression_ratio(static_cast<double>(r.float_bytes), static_cast<double>(r.packed_bytes));
  return r;
}

/// Number of scales an export of this view serializes.
inline std::size_t count_extra_quant_params(const SharedModel& model, const PrecisionAssignment& assignment) {
  return compression_report(model, assignment).extra_quant_params;
}

}  // namespace qct
