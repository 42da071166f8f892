#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "transhp/tensor.hpp"

namespace transhp {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<int> worst_coordinate;  // index tuple into the checked tensor
  bool passed = false;
};

inline std::vector<int> unflatten_index(long flat, const std::vector<int>& shape) {
  std::vector<int> idx(shape.size(), 0);
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    idx[static_cast<size_t>(i)] = static_cast<int>(flat % shape[static_cast<size_t>(i)]);
    flat /= shape[static_cast<size_t>(i)];
  }
  return idx;
}

// Compares the analytic gradient of f at x against central finite
// differences. f must be deterministic; it may read x through a captured
// structure as long as that structure shares x's node. Failures are reported
// in the result, never thrown.
template <class S, class F>
GradCheckResult gradient_check(F&& f, Tensor<S> x, S h, double tolerance) {
  if (h <= S(0)) throw ContractError("gradient_check: h must be positive");
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tensor<S> loss = f(x);
    backward(loss);
  }
  const std::vector<S> analytic = x.grad();

  GradCheckResult res;
  res.worst_coordinate = unflatten_index(0, x.shape());
  NoGradGuard ng;
  auto& data = x.data();
  for (long i = 0; i < x.numel(); ++i) {
    const S orig = data[static_cast<size_t>(i)];
    data[static_cast<size_t>(i)] = orig + h;
    const double fp = static_cast<double>(f(x).item());
    data[static_cast<size_t>(i)] = orig - h;
    const double fm = static_cast<double>(f(x).item());
    data[static_cast<size_t>(i)] = orig;
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
    const double a = static_cast<double>(analytic[static_cast<size_t>(i)]);
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst_coordinate = unflatten_index(i, x.shape());
    }
  }
  res.passed = res.max_relative_error <= tolerance;
  return res;
}

}  // namespace transhp
