#pragma once

// Neural-network primitives over packed variable-length sequences. A batch
// of utterances is stored as one [rows x channels] matrix; Segments records
// where each utterance starts.

#include <cmath>
#include <limits>
#include <vector>

#include "qct/tensor.hpp"

namespace qct {

/// Row offsets of the utterances in a packed batch (size = count + 1).
struct Segments {
  std::vector<std::size_t> offsets{0};

  static Segments from_lengths(const std::vector<std::size_t>& lengths) {
    Segments s;
    for (auto len : lengths) s.offsets.push_back(s.offsets.back() + len);
    return s;
  }
  std::size_t count() const { return offsets.size() - 1; }
  std::size_t begin(std::size_t i) const { return offsets[i]; }
  std::size_t length(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
  std::size_t total() const { return offsets.back(); }
};

/// Softmax along `axis`, with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) throw DimensionError("softmax: axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Tensor out = detail::make_result(shape, {&x});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) z += (o[base + j * inner] = std::exp(xv[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) o[base + j * inner] /= z;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [outer, inner, len](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t b = 0; b < inner; ++b) {
          const std::size_t base = a * len * inner + b;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.value[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t i = base + j * inner;
            g[i] += self.value[i] * (self.grad[i] - dot);
          }
        }
      }
    };
  }
  return out;
}

namespace detail {
inline void log_softmax_row(const double* in, double* out, std::size_t c) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < c; ++j) out[j] = in[j] - lz;
}
}  // namespace detail

/// Row-wise log-softmax of a matrix.
inline Tensor log_softmax(const Tensor& x) {
  detail::require_matrix(x, "log_softmax");
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out = detail::make_result(x.shape(), {&x});
  for (std::size_t r = 0; r < n; ++r) detail::log_softmax_row(&x.values()[r * c], &out.mutable_values()[r * c], c);
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t r = 0; r < n; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += self.grad[r * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          g[r * c + j] += self.grad[r * c + j] - std::exp(self.value[r * c + j]) * gs;
        }
      }
    };
  }
  return out;
}

/// Per-row layer normalization with affine gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), c = x.cols();
  if (gain.numel() != c || shift.numel() != c) throw DimensionError("layer_norm: affine size mismatch");
  Tensor out = detail::make_result(x.shape(), {&x, &gain, &shift});
  std::vector<double> xhat(n * c), inv_std(n);
  auto xv = x.values();
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[r * c + j] - mu) * (xv[r * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (xv[r * c + j] - mu) * inv_std[r];
      o[r * c + j] = xhat[r * c + j] * gain[j] + shift[j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
      const auto& gv = self.inputs[1]->value;
      if (detail::wants_grad(self, 1)) {
        auto& gg = detail::input_grad(self, 1);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) gg[j] += self.grad[r * c + j] * xhat[r * c + j];
      }
      if (detail::wants_grad(self, 2)) {
        auto& gb = detail::input_grad(self, 2);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[r * c + j];
      }
      if (detail::wants_grad(self, 0)) {
        auto& gx = detail::input_grad(self, 0);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < n; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            double dxh = self.grad[r * c + j] * gv[j];
            s1 += dxh;
            s2 += dxh * xhat[r * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            double dxh = self.grad[r * c + j] * gv[j];
            gx[r * c + j] += inv_std[r] * (dxh - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
          }
        }
      }
    };
  }
  return out;
}

/// Depthwise 1-D convolution along time with "same" zero padding inside
/// each segment. x: [rows x C], kernel: [K x C] with K odd.
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Segments& segs) {
  detail::require_matrix(x, "depthwise_conv1d");
  detail::require_matrix(kernel, "depthwise_conv1d");
  const std::size_t c = x.cols(), k = kernel.rows();
  if (kernel.cols() != c) throw DimensionError("depthwise_conv1d: channel mismatch");
  if (k % 2 == 0) throw DimensionError("depthwise_conv1d: kernel size must be odd");
  if (segs.total() != x.rows()) throw DimensionError("depthwise_conv1d: segments do not cover rows");
  const long half = static_cast<long>(k / 2);
  Tensor out = detail::make_result(x.shape(), {&x, &kernel});
  auto xv = x.values();
  auto wv = kernel.values();
  auto o = out.mutable_values();
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const long b = static_cast<long>(segs.begin(s)), len = static_cast<long>(segs.length(s));
    for (long t = 0; t < len; ++t) {
      double* dst = &o[(b + t) * c];
      for (long d = -half; d <= half; ++d) {
        long u = t + d;
        if (u < 0 || u >= len) continue;
        const double* src = &xv[(b + u) * c];
        const double* w = &wv[(d + half) * c];
        for (std::size_t j = 0; j < c; ++j) dst[j] += w[j] * src[j];
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [c, half, segs](Node& self) {
      const auto& xv = self.inputs[0]->value;
      const auto& wv = self.inputs[1]->value;
      const bool gx_on = detail::wants_grad(self, 0), gw_on = detail::wants_grad(self, 1);
      std::vector<double>* gx = gx_on ? &detail::input_grad(self, 0) : nullptr;
      std::vector<double>* gw = gw_on ? &detail::input_grad(self, 1) : nullptr;
      for (std::size_t s = 0; s < segs.count(); ++s) {
        const long b = static_cast<long>(segs.begin(s)), len = static_cast<long>(segs.length(s));
        for (long t = 0; t < len; ++t) {
          const double* up = &self.grad[(b + t) * c];
          for (long d = -half; d <= half; ++d) {
            long u = t + d;
            if (u < 0 || u >= len) continue;
            for (std::size_t j = 0; j < c; ++j) {
              if (gx_on) (*gx)[(b + u) * c + j] += up[j] * wv[(d + half) * c + j];
              if (gw_on) (*gw)[(d + half) * c + j] += up[j] * xv[(b + u) * c + j];
            }
          }
        }
      }
    };
  }
  return out;
}

/// Scaled dot-product multi-head attention between packed query and
/// key/value sequences. Query segment i attends only within key/value
/// segment i; `causal` additionally masks keys after the query position.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                  const Segments& q_segs, const Segments& kv_segs, bool causal) {
  detail::require_matrix(q, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw DimensionError("attention: q/k/v mismatch");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: model dim not divisible by heads");
  if (q_segs.count() != kv_segs.count() || q_segs.total() != q.rows() || kv_segs.total() != k.rows()) {
    throw DimensionError("attention: segments do not match inputs");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = detail::make_result(q.shape(), {&q, &k, &v});

  // Attention probabilities per (segment, head), stored contiguously.
  std::vector<std::size_t> prob_offset(q_segs.count() + 1, 0);
  for (std::size_t s = 0; s < q_segs.count(); ++s) {
    prob_offset[s + 1] = prob_offset[s] + heads * q_segs.length(s) * kv_segs.length(s);
  }
  std::vector<double> probs(prob_offset.back());
  auto qv = q.values(), kv = k.values(), vv = v.values();
  auto o = out.mutable_values();
  for (std::size_t s = 0; s < q_segs.count(); ++s) {
    const std::size_t qb = q_segs.begin(s), lq = q_segs.length(s);
    const std::size_t kb = kv_segs.begin(s), lk = kv_segs.length(s);
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = &probs[prob_offset[s] + h * lq * lk];
      for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t limit = causal ? std::min(lk, i + 1) : lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += qv[(qb + i) * d + h * dh + e] * kv[(kb + j) * d + h * dh + e];
          p[i * lk + j] = acc * inv_sqrt;
          mx = std::max(mx, p[i * lk + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) z += (p[i * lk + j] = std::exp(p[i * lk + j] - mx));
        for (std::size_t j = 0; j < limit; ++j) p[i * lk + j] /= z;
        for (std::size_t j = limit; j < lk; ++j) p[i * lk + j] = 0.0;
        double* dst = &o[(qb + i) * d + h * dh];
        for (std::size_t j = 0; j < limit; ++j) {
          const double pij = p[i * lk + j];
          const double* src = &vv[(kb + j) * d + h * dh];
          for (std::size_t e = 0; e < dh; ++e) dst[e] += pij * src[e];
        }
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [=, probs = std::move(probs), prob_offset = std::move(prob_offset)](Node& self) {
      const auto& qv = self.inputs[0]->value;
      const auto& kv = self.inputs[1]->value;
      const auto& vv = self.inputs[2]->value;
      const bool want_q = detail::wants_grad(self, 0), want_k = detail::wants_grad(self, 1),
                 want_v = detail::wants_grad(self, 2);
      std::vector<double>* gq = want_q ? &detail::input_grad(self, 0) : nullptr;
      std::vector<double>* gk = want_k ? &detail::input_grad(self, 1) : nullptr;
      std::vector<double>* gv = want_v ? &detail::input_grad(self, 2) : nullptr;
      std::vector<double> dp;
      for (std::size_t s = 0; s < q_segs.count(); ++s) {
        const std::size_t qb = q_segs.begin(s), lq = q_segs.length(s);
        const std::size_t kb = kv_segs.begin(s), lk = kv_segs.length(s);
        dp.assign(lk, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
          const double* p = &probs[prob_offset[s] + h * lq * lk];
          for (std::size_t i = 0; i < lq; ++i) {
            const std::size_t limit = causal ? std::min(lk, i + 1) : lk;
            const double* up = &self.grad[(qb + i) * d + h * dh];
            double dot = 0.0;
            for (std::size_t j = 0; j < limit; ++j) {
              const double* src = &vv[(kb + j) * d + h * dh];
              double acc = 0.0;
              for (std::size_t e = 0; e < dh; ++e) acc += up[e] * src[e];
              dp[j] = acc;
              dot += acc * p[i * lk + j];
              if (want_v) {
                double* gvr = &(*gv)[(kb + j) * d + h * dh];
                for (std::size_t e = 0; e < dh; ++e) gvr[e] += p[i * lk + j] * up[e];
              }
            }
            for (std::size_t j = 0; j < limit; ++j) {
              const double ds = p[i * lk + j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              if (want_q) {
                double* gqr = &(*gq)[(qb + i) * d + h * dh];
                const double* kr = &kv[(kb + j) * d + h * dh];
                for (std::size_t e = 0; e < dh; ++e) gqr[e] += ds * kr[e];
              }
              if (want_k) {
                double* gkr = &(*gk)[(kb + j) * d + h * dh];
                const double* qr = &qv[(qb + i) * d + h * dh];
                for (std::size_t e = 0; e < dh; ++e) gkr[e] += ds * qr[e];
              }
            }
          }
        }
      }
    };
  }
  return out;
}

/// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw IndexError("embedding: id out of range");
  }
  Tensor out = detail::make_result(Shape{ids.size(), d}, {&table});
  auto o = out.mutable_values();
  auto tv = table.values();
  for (std::size_t r = 0; r < ids.size(); ++r) std::copy_n(&tv[ids[r] * d], d, &o[r * d]);
  if (out.requires_grad()) {
    out.node()->backward_fn = [ids, d](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[ids[r] * d + j] += self.grad[r * d + j];
    };
  }
  return out;
}

/// Concatenates each run of `factor` consecutive frames of a segment into
/// one row (trailing frames that do not fill a group are dropped).
inline Tensor stack_frames(const Tensor& x, const Segments& segs, std::size_t factor, Segments* out_segs) {
  detail::require_matrix(x, "stack_frames");
  const std::size_t f = x.cols();
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> src_rows;
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const std::size_t len = segs.length(s) / factor;
    if (len == 0) throw ContractError("stack_frames: utterance shorter than the subsampling factor");
    lengths.push_back(len);
    for (std::size_t t = 0; t < len; ++t) src_rows.push_back(segs.begin(s) + t * factor);
  }
  *out_segs = Segments::from_lengths(lengths);
  const std::size_t width = f * factor;
  Tensor out = detail::make_result(Shape{src_rows.size(), width}, {&x});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t r = 0; r < src_rows.size(); ++r) std::copy_n(&xv[src_rows[r] * f], width, &o[r * width]);
  if (out.requires_grad()) {
    out.node()->backward_fn = [src_rows, width, f](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t r = 0; r < src_rows.size(); ++r)
        for (std::size_t j = 0; j < width; ++j) g[src_rows[r] * f + j] += self.grad[r * width + j];
    };
  }
  return out;
}

/// Sinusoidal position table for every row of a packed batch (position
/// restarts at each segment).
inline Tensor sinusoidal_positions(const Segments& segs, std::size_t dim) {
  std::vector<double> values(segs.total() * dim);
  for (std::size_t s = 0; s < segs.count(); ++s) {
    for (std::size_t t = 0; t < segs.length(s); ++t) {
      double* row = &values[(segs.begin(s) + t) * dim];
      for (std::size_t j = 0; j < dim; j += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(dim));
        row[j] = std::sin(static_cast<double>(t) * freq);
        if (j + 1 < dim) row[j + 1] = std::cos(static_cast<double>(t) * freq);
      }
    }
  }
  return Tensor(Shape{segs.total(), dim}, std::move(values));
}

}  // namespace qct
