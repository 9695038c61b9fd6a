#pragma once

// Central finite-difference checks for the autodiff graph. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cadenza/core/autograd.hpp"

namespace cadenza::testing {

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  std::size_t checked = 0;
};

// Compares d loss / d params from backward() against central differences with
// step h. At most `max_entries` coordinates per parameter are probed (evenly
// strided) to keep big tensors cheap.
inline GradCheckResult grad_check(std::vector<ag::Var> params, const std::function<ag::Var()>& loss_fn,
                                  double h = 1e-4, std::size_t max_entries = 64) {
  for (auto& p : params) p.zero_grad();
  loss_fn().backward();
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  GradCheckResult res;
  for (auto& p : params) {
    auto& w = p.mutable_value().data;
    const std::vector<double> analytic = p.grad().data;
    const std::size_t stride = std::max<std::size_t>(1, w.size() / max_entries);
    for (std::size_t i = 0; i < w.size(); i += stride) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = loss_fn().item();
      w[i] = orig - h;
      const double down = loss_fn().item();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++res.checked;
    }
  }
  res.analytic_norm = std::sqrt(a2);
  res.numeric_norm = std::sqrt(n2);
  const double denom = std::max({res.analytic_norm, res.numeric_norm, 1e-12});
  res.rel_error = std::sqrt(diff2) / denom;
  return res;
}

}  // namespace cadenza::testing
