#include "ellipse/evidential.hpp"

#include <cmath>
#include <numbers>

#include "ellipse/error.hpp"

namespace ellipse {

void NIWParams::validate() const {
  const auto d = static_cast<double>(dim());
  if (mu.empty() || psi.dim() != mu.size()) fail(ErrorCode::DimensionMismatch, "NIW mu/psi dims differ");
  if (!(kappa > 0.0)) fail(ErrorCode::DomainError, "NIW kappa must be positive");
  if (!(nu > d - 1.0 + kNuEpsilon * 0.999999)) fail(ErrorCode::DomainError, "NIW nu below d - 1 + eps");
}

Matrix StudentTPredictive::covariance() const {
  Matrix s = scale.to_matrix();
  if (dof > 2.0) return s * (dof / (dof - 2.0));
  return s;
}

StudentTPredictive predictive(const NIWParams& niw) {
  const std::size_t d = niw.dim();
  if (niw.psi.dim() != d) fail(ErrorCode::DimensionMismatch, "NIW mu/psi dims differ");
  const double dof = niw.nu - static_cast<double>(d) + 1.0;
  if (!(dof > 0.0)) fail(ErrorCode::DegenerateEvidence, "nu - d + 1 must be positive");
  if (!(niw.kappa > 0.0)) fail(ErrorCode::DegenerateEvidence, "kappa must be positive");
  const double factor = (niw.kappa + 1.0) / (niw.kappa * dof);
  return StudentTPredictive{niw.mu, niw.psi.scaled(factor), dof};
}

double mahalanobis_sq(const StudentTPredictive& t, std::span<const double> y) {
  if (y.size() != t.dim() || t.scale.dim() != t.dim())
    fail(ErrorCode::DimensionMismatch, "observation length differs from predictive dim");
  Vector r(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] - t.loc[i];
  // ‖L⁻¹ r‖² equals rᵀ(LLᵀ)⁻¹r and is nonnegative by construction.
  const Vector z = forward_substitute(t.scale, r);
  double s = 0.0;
  for (double v : z) s += v * v;
  return s;
}

double log_pdf(const StudentTPredictive& t, std::span<const double> y) {
  const double m2 = mahalanobis_sq(t, y);
  const auto d = static_cast<double>(t.dim());
  const double dof = t.dof;
  return log_gamma(0.5 * (dof + d)) - log_gamma(0.5 * dof) - 0.5 * d * std::log(dof * std::numbers::pi) -
         0.5 * t.scale.log_det() - 0.5 * (dof + d) * std::log1p(m2 / dof);
}

double pit(const StudentTPredictive& t, std::span<const double> y) {
  const double m2 = mahalanobis_sq(t, y);
  const int d = static_cast<int>(t.dim());
  return f_cdf(d, t.dof, m2 / d);
}

double nll(const NIWParams& niw, std::span<const double> y) { return -log_pdf(predictive(niw), y); }

double evidential_loss(const NIWParams& niw, std::span<const double> y, double lambda_reg) {
  const double base = nll(niw, y);
  if (lambda_reg == 0.0) return base;
  double l1 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) l1 += std::abs(y[i] - niw.mu[i]);
  return base + lambda_reg * l1 * evidence_weight(niw.kappa, niw.nu);
}

}  // namespace ellipse
