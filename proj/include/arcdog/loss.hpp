#pragma once

#include <atomic>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "arcdog/data.hpp"
#include "arcdog/linalg.hpp"
#include "arcdog/ops.hpp"

namespace arcdog {

/// Weighting and shape of the activation-regression objective.
/// `ridge` is a relative scale: the solve adds ridge·trace(ΘᵀΘ)/f to the
/// Gram diagonal, so 0 means an exact projection.
struct LossConfig {
  double c = 0.0;
  bool normalize_residual = true;
  bool square_residual = false;
  double ridge = 1e-6;

  void validate() const {
    if (ridge < 0.0) throw ConfigError("loss: ridge must be >= 0");
  }
};

/// total = classification − c · regression_term. All three are scalar
/// tensors on the tape; gradients flow into logits and features only.
struct LossBreakdown {
  Tensor classification;
  Tensor regression_term;
  Tensor total;
  LeastSquaresResult regression_detail;

  double classification_value() const { return classification.value(); }
  double regression_value() const { return regression_term.value(); }
  double total_value() const { return total.value(); }
};

namespace detail {

inline std::atomic<bool>& underdetermined_warned() {
  static std::atomic<bool> flag{false};
  return flag;
}

}  // namespace detail

/// Cross-entropy plus the signed, normalized closed-form regression term on
/// batch activations: residual_norm/target_norm of regressing domains from
/// features. Domains enter as constants.
inline LossBreakdown arcdog_loss(const Tensor& logits, const std::vector<std::int64_t>& labels,
                                 const Tensor& features, const Tensor& domains,
                                 const LossConfig& config) {
  config.validate();
  detail::require(features.rank() == 2 && domains.rank() == 2 &&
                      features.dim(0) == domains.dim(0),
                  "arcdog_loss: features " + format_shape(features.shape()) +
                      " and domains " + format_shape(domains.shape()) + " disagree on rows");
  const auto m = features.dim(0), f = features.dim(1);
  if (m < f && !detail::underdetermined_warned().exchange(true)) {
    std::cerr << "warning: regression batch has fewer rows (" << m << ") than feature dims (" << f
              << "); the closed-form fit is underdetermined\n";
  }

  LossBreakdown out;
  out.classification = cross_entropy(logits, labels);

  // absolute ridge = relative scale × trace(ΘᵀΘ)/f; since this makes the
  // ridge a function of Θ (∂ε/∂Θ = 2·ridge/f · Θ), the solve's backward is
  // told about the coupling
  double trace = 0.0;
  for (double v : features.data()) trace += v * v;
  const double ridge_abs = config.ridge * trace / static_cast<double>(f);
  const double coupling = 2.0 * config.ridge / static_cast<double>(f);

  Tensor residual = least_squares_residual(features, domains, ridge_abs, config.square_residual,
                                           &out.regression_detail, coupling);
  if (config.normalize_residual) {
    const double target = out.regression_detail.target_norm;
    if (target <= 0.0) throw DataError("arcdog_loss: degenerate domain batch (‖V‖ = 0)");
    const double denom = config.square_residual ? target * target : target;
    out.regression_term = scale(residual, 1.0 / denom);
  } else {
    out.regression_term = residual;
  }
  out.total = sub(out.classification, scale(out.regression_term, config.c));
  return out;
}

/// Stacks z-scored climate vectors (training-split stats) for the chosen
/// variable subset, rows in sample order.
inline Tensor domain_matrix(const Dataset& ds, std::span<const std::int64_t> indices,
                            ClimateMode mode = ClimateMode::all) {
  if (!ds.stats.fitted) throw DataError("domain_matrix: normalization stats not fitted");
  const auto cc = climate_columns(mode == ClimateMode::none ? ClimateMode::all : mode,
                                  ds.climate_dim);
  const auto m = static_cast<std::int64_t>(indices.size());
  std::vector<double> data(static_cast<std::size_t>(m * cc.count));
  for (std::int64_t r = 0; r < m; ++r) {
    const auto& s = ds.samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(r)])];
    if (static_cast<std::int64_t>(s.climate.size()) != ds.climate_dim)
      throw DataError("domain_matrix: sample missing climate fields");
    for (std::int64_t j = 0; j < cc.count; ++j) {
      const auto src = static_cast<std::size_t>(cc.start + j);
      data[static_cast<std::size_t>(r * cc.count + j)] = detail::zscore(
          s.climate[src], ds.stats.climate_mean[src], ds.stats.climate_std[src]);
    }
  }
  return Tensor::from_data({m, cc.count}, std::move(data));
}

}  // namespace arcdog
