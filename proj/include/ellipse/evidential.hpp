#pragma once

// Normal-Inverse-Wishart evidence and its multivariate Student-t posterior
// predictive, plus the evidential training loss and the PIT transform.

#include <span>

#include "ellipse/numerics.hpp"

namespace ellipse {

/// Lower bound margin on ν above d − 1.
inline constexpr double kNuEpsilon = 1e-3;

/// Default weight of the evidence-scaled error regularizer.
inline constexpr double kDefaultLambdaReg = 0.01;

struct NIWParams {
  Vector mu;
  double kappa;
  SpdMatrix psi;
  double nu;

  std::size_t dim() const noexcept { return mu.size(); }
  /// Throws DomainError when κ ≤ 0, ν ≤ d − 1 + ε, or shapes disagree.
  void validate() const;
};

struct StudentTPredictive {
  Vector loc;
  SpdMatrix scale;
  double dof;

  std::size_t dim() const noexcept { return loc.size(); }
  /// scale·dof/(dof−2) when dof > 2; the scale itself otherwise.
  Matrix covariance() const;
};

StudentTPredictive predictive(const NIWParams& niw);

double mahalanobis_sq(const StudentTPredictive& t, std::span<const double> y);
double log_pdf(const StudentTPredictive& t, std::span<const double> y);

/// Mahalanobis-radius PIT: m²/d follows F(d, dof) under the predictive.
double pit(const StudentTPredictive& t, std::span<const double> y);

double nll(const NIWParams& niw, std::span<const double> y);

/// nll + λ·‖y − μ‖₁·(κ + ν)
double evidential_loss(const NIWParams& niw, std::span<const double> y, double lambda_reg);

/// Evidence weight multiplying the L1 error in the regularizer.
inline double evidence_weight(double kappa, double nu) { return kappa + nu; }

}  // namespace ellipse
