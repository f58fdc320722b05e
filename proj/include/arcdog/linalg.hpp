#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "arcdog/ops.hpp"
#include "arcdog/tensor.hpp"

namespace arcdog {

/// Output of the closed-form least-squares projection of targets onto the
/// column space of features.
struct LeastSquaresResult {
  Tensor coefficients;   // f x d, the minimizing regressor
  Tensor fitted;         // m x d, features · coefficients
  double residual_norm = 0.0;  // Frobenius norm of (targets - fitted)
  double target_norm = 0.0;    // Frobenius norm of targets
};

namespace detail {

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix
/// stored row-major in `g` (n x n). Throws RankDeficientError when a pivot
/// falls below the scaled tolerance.
inline std::vector<double> cholesky_spd(const std::vector<double>& g, std::int64_t n,
                                        bool ridgeless) {
  std::vector<double> L(static_cast<std::size_t>(n * n), 0.0);
  double max_diag = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    max_diag = std::max(max_diag, std::fabs(g[static_cast<std::size_t>(i * n + i)]));
  const double tol =
      static_cast<double>(n) * std::numeric_limits<double>::epsilon() * std::max(max_diag, 1e-300);
  for (std::int64_t j = 0; j < n; ++j) {
    double d = g[static_cast<std::size_t>(j * n + j)];
    for (std::int64_t k = 0; k < j; ++k) d -= L[static_cast<std::size_t>(j * n + k)] * L[static_cast<std::size_t>(j * n + k)];
    if (!(d > tol)) {
      if (ridgeless)
        throw RankDeficientError("rank-deficient features: normal-equation pivot " +
                                 std::to_string(d) + " at column " + std::to_string(j) +
                                 " (ridge is 0)");
      throw NumericError("least-squares solve failed: non-positive pivot despite ridge");
    }
    const double dj = std::sqrt(d);
    L[static_cast<std::size_t>(j * n + j)] = dj;
    for (std::int64_t i = j + 1; i < n; ++i) {
      double s = g[static_cast<std::size_t>(i * n + j)];
      for (std::int64_t k = 0; k < j; ++k)
        s -= L[static_cast<std::size_t>(i * n + k)] * L[static_cast<std::size_t>(j * n + k)];
      L[static_cast<std::size_t>(i * n + j)] = s / dj;
    }
  }
  return L;
}

/// Solves (L·Lᵀ)·X = B in place; B is n x d row-major.
inline void cholesky_solve(const std::vector<double>& L, std::int64_t n, double* B, std::int64_t d) {
  // forward: L·Y = B
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < i; ++k) {
      const double lik = L[static_cast<std::size_t>(i * n + k)];
      for (std::int64_t c = 0; c < d; ++c) B[i * d + c] -= lik * B[k * d + c];
    }
    const double dii = L[static_cast<std::size_t>(i * n + i)];
    for (std::int64_t c = 0; c < d; ++c) B[i * d + c] /= dii;
  }
  // backward: Lᵀ·X = Y
  for (std::int64_t i = n - 1; i >= 0; --i) {
    for (std::int64_t k = i + 1; k < n; ++k) {
      const double lki = L[static_cast<std::size_t>(k * n + i)];
      for (std::int64_t c = 0; c < d; ++c) B[i * d + c] -= lki * B[k * d + c];
    }
    const double dii = L[static_cast<std::size_t>(i * n + i)];
    for (std::int64_t c = 0; c < d; ++c) B[i * d + c] /= dii;
  }
}

inline double frobenius(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Everything the backward pass needs from a forward least-squares solve.
struct LeastSquaresRecord {
  bool valid = false;
  std::int64_t m = 0, f = 0, d = 0;
  std::vector<double> features;      // m x f
  std::vector<double> coefficients;  // f x d
  std::vector<double> residual;      // m x d, targets - fitted
  std::vector<double> chol;          // f x f lower factor of (ΘᵀΘ + ridge·I)
  double residual_norm = 0.0;
};

/// Closed-form linear least squares: minimizes ‖features·Φ − targets‖_F via
/// the normal equations (ΘᵀΘ + ridge·I)Φ = Θᵀ·targets, solved with a
/// Cholesky factorization of the f x f Gram matrix. The m x m projector is
/// never formed. A ridge of 0 demands full column rank.
inline LeastSquaresResult pinv_least_squares(const Tensor& features, const Tensor& targets,
                                             double ridge, LeastSquaresRecord* record = nullptr) {
  detail::require(features.rank() == 2 && targets.rank() == 2,
                  "pinv_least_squares: expected 2-D features/targets, got " +
                      format_shape(features.shape()) + " and " + format_shape(targets.shape()));
  const auto m = features.dim(0), f = features.dim(1), d = targets.dim(1);
  detail::require(m >= 1 && f >= 1 && d >= 1, "pinv_least_squares: empty operand");
  detail::require(targets.dim(0) == m, "pinv_least_squares: row mismatch " +
                                           format_shape(features.shape()) + " vs " +
                                           format_shape(targets.shape()));
  if (ridge < 0.0) throw ShapeError("pinv_least_squares: negative ridge");
  detail::check_finite(features.data(), "pinv_least_squares(features)");
  detail::check_finite(targets.data(), "pinv_least_squares(targets)");

  auto Th = detail::cmap(features.data(), m, f);
  auto V = detail::cmap(targets.data(), m, d);

  std::vector<double> gram(static_cast<std::size_t>(f * f));
  detail::map(gram, f, f).noalias() = Th.transpose() * Th;
  for (std::int64_t i = 0; i < f; ++i) gram[static_cast<std::size_t>(i * f + i)] += ridge;
  std::vector<double> L = detail::cholesky_spd(gram, f, ridge == 0.0);

  std::vector<double> coef(static_cast<std::size_t>(f * d));
  detail::map(coef, f, d).noalias() = Th.transpose() * V;
  detail::cholesky_solve(L, f, coef.data(), d);

  std::vector<double> fitted(static_cast<std::size_t>(m * d));
  detail::map(fitted, m, d).noalias() = Th * detail::cmap(coef, f, d);
  std::vector<double> resid(static_cast<std::size_t>(m * d));
  for (std::size_t i = 0; i < resid.size(); ++i)
    resid[i] = targets.data()[i] - fitted[i];

  LeastSquaresResult out;
  out.residual_norm = detail::frobenius(resid);
  out.target_norm = detail::frobenius(targets.data());
  out.coefficients = Tensor::from_data({f, d}, coef);
  out.fitted = Tensor::from_data({m, d}, std::move(fitted));
  if (record) {
    record->valid = true;
    record->m = m;
    record->f = f;
    record->d = d;
    record->features.assign(features.data().begin(), features.data().end());
    record->coefficients = coef;
    record->residual = std::move(resid);
    record->chol = std::move(L);
    record->residual_norm = out.residual_norm;
  }
  return out;
}

/// Adjoint of the least-squares solve: gradient of the residual loss with
/// respect to the features. `upstream` is dL/d(residual_norm), or
/// dL/d(residual_norm²) when `squared`. Targets are treated as constants.
///
/// With W = dL/dR (m x d), Φ the coefficients, R the residual and
/// G = ΘᵀΘ + ridge·I factored as L·Lᵀ:
///   dL/dΘ = −W·Φᵀ − R·Bᵀ + Θ·(B·Φᵀ),  B = G⁻¹·(Θᵀ·W)
/// which stays in f x f / m x f sized intermediates.
inline Tensor backward_pinv_least_squares(const LeastSquaresRecord& rec, double upstream,
                                          bool squared) {
  if (!rec.valid) throw NumericError("backward_pinv_least_squares: missing forward record");
  const auto m = rec.m, f = rec.f, d = rec.d;
  Tensor grad(Shape{m, f}, 0.0);
  // W = upstream · dr/dR; for the plain norm r = ‖R‖_F this is upstream·R/r,
  // which vanishes in the limit R → 0 (subgradient 0 at the kink).
  double w_scale;
  if (squared) {
    w_scale = 2.0 * upstream;
  } else {
    if (rec.residual_norm <= 0.0 || upstream == 0.0) return grad;
    w_scale = upstream / rec.residual_norm;
  }
  if (w_scale == 0.0) return grad;

  auto Th = detail::CMatMap(rec.features.data(), m, f);
  auto R = detail::CMatMap(rec.residual.data(), m, d);
  auto Phi = detail::CMatMap(rec.coefficients.data(), f, d);

  detail::EMat W = w_scale * R;
  std::vector<double> B(static_cast<std::size_t>(f * d));
  detail::map(B, f, d).noalias() = Th.transpose() * W;
  detail::cholesky_solve(rec.chol, f, B.data(), d);
  auto Bm = detail::cmap(B, f, d);

  auto G = detail::map(grad.data(), m, f);
  G.noalias() = -W * Phi.transpose();
  G.noalias() -= R * Bm.transpose();
  G.noalias() += Th * (Bm * Phi.transpose());
  detail::check_finite(grad.data(), "backward_pinv_least_squares");
  return grad;
}

/// Sensitivity of the residual loss to the ridge: dL/dε = ⟨W, Θ·G⁻¹·Φ⟩.
inline double residual_ridge_sensitivity(const LeastSquaresRecord& rec, double upstream,
                                         bool squared) {
  if (!rec.valid) throw NumericError("residual_ridge_sensitivity: missing forward record");
  double w_scale;
  if (squared) {
    w_scale = 2.0 * upstream;
  } else {
    if (rec.residual_norm <= 0.0 || upstream == 0.0) return 0.0;
    w_scale = upstream / rec.residual_norm;
  }
  std::vector<double> s = rec.coefficients;  // S = G⁻¹·Φ
  detail::cholesky_solve(rec.chol, rec.f, s.data(), rec.d);
  detail::EMat ths = detail::CMatMap(rec.features.data(), rec.m, rec.f) *
                     detail::CMatMap(s.data(), rec.f, rec.d);
  double acc = 0.0;
  for (std::int64_t i = 0; i < rec.m * rec.d; ++i)
    acc += rec.residual[static_cast<std::size_t>(i)] * ths.data()[i];
  return w_scale * acc;
}

/// Differentiable residual norm of the closed-form solve, as a scalar tensor
/// on the tape. Gradients flow into `features` only; `targets` enter as
/// constants. `detail_out`, when given, receives the full solve result.
///
/// When the caller derives the ridge from the features themselves as
/// ε = α/2 · trace(ΘᵀΘ) (so ∂ε/∂Θ = α·Θ), pass that α as
/// `ridge_theta_coupling` and the backward includes the ε path.
inline Tensor least_squares_residual(const Tensor& features, const Tensor& targets, double ridge,
                                     bool squared = false,
                                     LeastSquaresResult* detail_out = nullptr,
                                     double ridge_theta_coupling = 0.0) {
  auto rec = std::make_shared<LeastSquaresRecord>();
  LeastSquaresResult res = pinv_least_squares(features, targets, ridge, rec.get());
  if (detail_out) *detail_out = res;
  DataBuf out(1);
  out[0] = squared ? res.residual_norm * res.residual_norm : res.residual_norm;
  return detail::op_result(
      "least_squares_residual", {}, std::move(out), {features},
      [features, rec, squared, ridge_theta_coupling](detail::TensorNode* self) {
        return [features, rec, squared, ridge_theta_coupling, self]() {
          if (!features.requires_grad()) return;
          const double upstream = self->grad[0];
          if (upstream == 0.0) return;
          Tensor g = backward_pinv_least_squares(*rec, upstream, squared);
          if (ridge_theta_coupling != 0.0) {
            const double dLde = residual_ridge_sensitivity(*rec, upstream, squared);
            const double coef = dLde * ridge_theta_coupling;
            auto gd = g.data();
            for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += coef * rec->features[i];
          }
          detail::accumulate(features.node().get(), g.data());
        };
      });
}

}  // namespace arcdog
