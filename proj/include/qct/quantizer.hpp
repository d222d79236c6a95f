#pragma once

// Symmetric n-bit weight quantization with one learnable scale per tensor.
//
//   W_hat = alpha * project(clip(W / alpha, -M, M))
//
// where M is the largest level magnitude. Weight gradients use a clipped
// straight-through estimator; the scale gradient is
//
//   dW_hat/dalpha = -W/alpha + project(W/alpha)   if |W/alpha| <  M
//                 = sign(W/alpha)                  if |W/alpha| >= M
//
// (the saturated branch is the true derivative divided by M).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qct/tensor.hpp"

namespace qct {

inline constexpr double kMinScale = 1e-8;

struct QuantTable {
  int bits = 0;
  std::vector<int> levels;  // sorted ascending

  int max_level() const { return levels.back(); }
  int min_level() const { return levels.front(); }
  std::size_t size() const { return levels.size(); }

  /// Position of `level` in the sorted table.
  std::size_t index_of(int level) const {
    return bits == 1 ? (level > 0 ? 1u : 0u) : static_cast<std::size_t>(level - min_level());
  }
  int level_at(std::size_t index) const { return levels.at(index); }
};

inline bool supported_bits(int bits) { return bits == 1 || bits == 2 || bits == 4 || bits == 8; }

inline QuantTable build_table(int bits) {
  if (!supported_bits(bits)) throw ConfigError("unsupported quantization bit-width " + std::to_string(bits));
  QuantTable table;
  table.bits = bits;
  if (bits == 1) {
    table.levels = {-1, 1};
  } else {
    const int m = (1 << (bits - 1)) - 1;
    for (int l = -m; l <= m; ++l) table.levels.push_back(l);
  }
  return table;
}

/// Nearest level to x; ties round away from zero (x = 0 maps to +1 in the
/// binary table).
inline int project(double x, const QuantTable& table) {
  if (table.bits == 1) return x >= 0.0 ? 1 : -1;
  const double m = table.max_level();
  const double r = std::round(x);  // half away from zero
  return static_cast<int>(std::clamp(r, -m, m));
}

/// Integer level of each entry of W at scale alpha.
inline std::vector<int> quantize_codes(std::span<const double> w, double alpha, const QuantTable& table) {
  if (!(alpha > 0.0)) throw ContractError("quantize: scale must be positive");
  const double lo = table.min_level(), hi = table.max_level();
  std::vector<int> codes(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) codes[i] = project(std::clamp(w[i] / alpha, lo, hi), table);
  return codes;
}

inline std::vector<double> quantize_values(std::span<const double> w, double alpha, const QuantTable& table) {
  auto codes = quantize_codes(w, alpha, table);
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = alpha * codes[i];
  return out;
}

/// Clipped STE: upstream passes where |W/alpha| < M, zero elsewhere.
inline std::vector<double> ste_weight_grad(std::span<const double> upstream, std::span<const double> w, double alpha,
                                           const QuantTable& table) {
  if (upstream.size() != w.size()) throw DimensionError("ste_weight_grad: shape mismatch");
  const double m = table.max_level();
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = std::abs(w[i] / alpha) < m ? upstream[i] : 0.0;
  return out;
}

/// Elementwise dW_hat/dalpha.
inline double scale_grad(double w, double alpha, const QuantTable& table) {
  const double r = w / alpha;
  if (std::abs(r) < table.max_level()) return -r + project(r, table);
  return r > 0.0 ? 1.0 : -1.0;
}

inline std::vector<double> scale_grad(std::span<const double> w, double alpha, const QuantTable& table) {
  if (!(alpha > 0.0)) throw ContractError("scale_grad: scale must be positive");
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = scale_grad(w[i], alpha, table);
  return out;
}

/// Absmean initialization: mean|W| for 1 bit, mean|W| / M otherwise,
/// floored at kMinScale.
inline double init_scale(std::span<const double> w, int bits) {
  if (w.empty()) throw ContractError("init_scale: empty tensor");
  const QuantTable table = build_table(bits);
  double acc = 0.0;
  for (double v : w) acc += std::abs(v);
  double alpha = acc / static_cast<double>(w.size());
  if (bits > 1) alpha /= table.max_level();
  return std::max(alpha, kMinScale);
}

/// One learnable scale for a (tensor, precision) pair.
struct TensorScale {
  std::string owner;
  int bits = 0;
  Tensor alpha;  // shape [1], requires_grad

  double value() const { return alpha[0]; }
  void clamp() {
    auto v = alpha.mutable_values();
    v[0] = std::max(v[0], kMinScale);
  }
};

/// Autodiff quantization op: returns alpha * project(clip(W/alpha)). The
/// latent receives the clipped-STE gradient; alpha (if it requires a
/// gradient) receives sum(upstream * dW_hat/dalpha).
inline Tensor quantize(const Tensor& latent, const Tensor& alpha, const QuantTable& table) {
  if (alpha.numel() != 1) throw DimensionError("quantize: scale must be a scalar");
  const double a = alpha[0];
  Tensor out = detail::make_result(latent.shape(), {&latent, &alpha});
  auto codes = quantize_codes(latent.values(), a, table);
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * codes[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [table, a](Node& self) {
      const auto& w = self.inputs[0]->value;
      const double m = table.max_level();
      if (detail::wants_grad(self, 0)) {
        auto& g = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (std::abs(w[i] / a) < m) g[i] += self.grad[i];
        }
      }
      if (detail::wants_grad(self, 1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += self.grad[i] * scale_grad(w[i], a, table);
        detail::input_grad(self, 1)[0] += acc;
      }
    };
  }
  return out;
}

}  // namespace qct
