#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arcdog/tensor.hpp"

namespace arcdog {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Comparison of reverse-mode gradients against central finite differences.
/// Relative error is |analytic − numeric| / max(|analytic|, |numeric|, floor).
/// The floor makes entries with near-zero gradients compare absolutely (at
/// floor x tolerance): central differences of a double-precision forward
/// carry evaluation noise around 1e-8..1e-7 at step 1e-5, so demanding
/// 1e-4 relative agreement on entries that small would only measure that
/// noise, not the correctness of the formulas.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> per_param;
  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Runs `fn` (a scalar-valued function of the given named parameters) once
/// with the tape to collect reverse-mode gradients, then perturbs every
/// parameter entry by ±step and compares. `fn` must be deterministic across
/// calls (fix any dropout rng inside it).
inline GradCheckReport grad_check(const std::function<Tensor()>& fn,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double step = 1e-5, double rel_floor = 1e-3) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad())
      throw ShapeError("grad_check: parameter '" + name + "' does not require gradients");
  }
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor out = fn();
  if (out.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  out.backward();

  GradCheckReport report;
  for (const auto& [name, p] : params) {
    Tensor t = p;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    GradCheckEntry entry{name, 0.0, 0.0};
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = saved + step;
        plus = fn().value();
        data[i] = saved - step;
        minus = fn().value();
        data[i] = saved;
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double abs_err = std::fabs(analytic[i] - numeric);
      const double rel =
          abs_err / std::max({std::fabs(analytic[i]), std::fabs(numeric), rel_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace arcdog
