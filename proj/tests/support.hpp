#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "qct/tensor.hpp"

namespace qct::test_support {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double a, double b) {
  const double diff = std::abs(a - b);
  if (diff < 1e-9) return 0.0;
  return diff / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Fraction of entries whose analytic gradient matches a central finite
/// difference of `loss` within `tol` (relative).
struct GradCheck {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;      // relative, after the absolute floor in rel_err
  double worst_abs = 0.0;  // largest |analytic - numeric|

  double pass_rate() const { return checked == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(checked); }
};

inline GradCheck finite_difference_check(const std::vector<Tensor*>& params, const std::function<Tensor()>& loss,
                                         double tol, double eps = 1e-6) {
  for (Tensor* p : params) p->zero_grad();
  backward(loss());
  GradCheck r;
  for (Tensor* p : params) {
    auto values = p->mutable_values();
    const std::vector<double> analytic(p->grad().begin(), p->grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      double fp, fm;
      {
        NoGradGuard g;
        values[i] = keep + eps;
        fp = loss().item();
        values[i] = keep - eps;
        fm = loss().item();
      }
      values[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double e = rel_err(a, numeric);
      r.worst = std::max(r.worst, e);
      r.worst_abs = std::max(r.worst_abs, std::abs(a - numeric));
      ++r.checked;
      r.passed += e < tol;
    }
  }
  return r;
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so
/// every output entry carries a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng, 1.0, false)));
}

}  // namespace qct::test_support
