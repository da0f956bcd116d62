#pragma once

// Small dense SPD linear algebra and the special functions behind the
// Student-t predictive (log-gamma, regularized incomplete beta, F law).

#include <cstddef>
#include <span>
#include <vector>

namespace ellipse {

using Vector = std::vector<double>;

/// Row-major dense square or rectangular matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  static Matrix identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

Matrix operator*(const Matrix& a, double s);
Matrix operator+(const Matrix& a, const Matrix& b);

/// Symmetric positive definite matrix stored through its lower Cholesky factor.
class SpdMatrix {
 public:
  /// Takes ownership of a lower-triangular factor; throws NotPositiveDefinite
  /// if any diagonal entry is not strictly positive.
  SpdMatrix(std::size_t dim, std::vector<double> lower_chol);

  static SpdMatrix identity(std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  double chol(std::size_t i, std::size_t j) const { return lower_[i * dim_ + j]; }
  std::span<const double> lower_chol() const noexcept { return lower_; }

  /// L·Lᵀ
  Matrix to_matrix() const;
  /// ln det(L·Lᵀ) = 2 Σ ln L_ii
  double log_det() const;
  double trace() const;
  /// Returns the factor of c·A, c > 0.
  SpdMatrix scaled(double c) const;

 private:
  std::size_t dim_;
  std::vector<double> lower_;
};

inline constexpr double kPivotFloor = 1e-12;
inline constexpr double kSymmetryTol = 1e-9;

SpdMatrix cholesky(const Matrix& m);

/// Solves (L·Lᵀ)·x = v.
Vector spd_solve(const SpdMatrix& m, std::span<const double> v);

/// Solves L·z = v (forward substitution only).
Vector forward_substitute(const SpdMatrix& m, std::span<const double> v);

/// Plain dense matrix-vector product.
Vector mat_vec(const Matrix& m, std::span<const double> v);

/// Wraps an angle into (−π, π].
double wrap_angle(double a);

double log_gamma(double x);
double digamma(double x);

double regularized_incomplete_beta(double a, double b, double x);

/// Inverse of x ↦ I_x(a, b) on [0, 1].
double inverse_incomplete_beta(double a, double b, double p);

double f_cdf(int d1, double d2, double x);
double f_pdf(int d1, double d2, double x);
double f_quantile(int d1, double d2, double p);

}  // namespace ellipse
