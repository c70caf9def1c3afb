#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "grunlab/tensor.hpp"

namespace grunlab {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool finite = true;  // false when an evaluation went non-finite
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : params)
      m = std::max(m, e.finite ? e.max_rel_err
                               : std::numeric_limits<double>::infinity());
    return m;
  }

  bool ok(double tol) const {
    for (const auto& e : params)
      if (!e.finite || e.max_rel_err >= tol) return false;
    return true;
  }
};

// Compares reverse-mode gradients against central finite differences
// (f(x+h) - f(x-h)) / 2h, element by element. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as the denominator. Meant to run in
// 64-bit; `fn` must rebuild its graph from the live parameter values on
// every call.
template <class S>
GradCheckReport check_gradients(
    const std::function<Tensor<S>()>& fn,
    const std::vector<std::pair<std::string, Tensor<S>>>& params, S step) {
  if (!(step > S(0)))
    throw std::invalid_argument("check_gradients: step must be positive");

  GradCheckReport report;
  for (auto& [name, p] : params) {
    if (!p.requires_grad())
      throw std::invalid_argument("check_gradients: parameter '" + name +
                                  "' does not require grad");
    p.zero_grad();
    report.params.push_back({name, 0.0, true});
  }

  std::vector<std::vector<S>> analytic;
  try {
    Tensor<S> loss = fn();
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw std::domain_error("non-finite loss");
    loss.backward();
    for (auto& [name, p] : params) analytic.push_back(p.grad());
  } catch (const std::exception&) {
    // Evaluation failed at the point itself: report, don't crash.
    for (auto& e : report.params) e.finite = false;
    return report;
  }

  NoGradGuard ng;
  // Perturbed evaluations that throw or go non-finite mark the parameter
  // as failed rather than aborting the sweep.
  const auto eval_quiet = [&fn]() -> double {
    try {
      return static_cast<double>(fn().item());
    } catch (const std::exception&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].second;
    auto& entry = report.params[pi];
    auto& val = p.value();
    for (size_t i = 0; i < val.size(); ++i) {
      const S saved = val[i];
      val[i] = saved + step;
      const double f_plus = eval_quiet();
      val[i] = saved - step;
      const double f_minus = eval_quiet();
      val[i] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        entry.finite = false;
        continue;
      }
      const double numeric =
          (f_plus - f_minus) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_rel_err =
          std::max(entry.max_rel_err, std::abs(a - numeric) / denom);
    }
  }
  return report;
}

}  // namespace grunlab
