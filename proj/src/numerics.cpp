#include "ellipse/numerics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ellipse/error.hpp"

namespace ellipse {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) fail(ErrorCode::DimensionMismatch, "matrix data does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix operator*(const Matrix& a, double s) {
  Matrix out = a;
  for (double& x : out.data) x *= s;
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) fail(ErrorCode::DimensionMismatch, "matrix sum shapes differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

SpdMatrix::SpdMatrix(std::size_t dim, std::vector<double> lower_chol) : dim_(dim), lower_(std::move(lower_chol)) {
  if (dim_ == 0) fail(ErrorCode::DimensionMismatch, "SPD matrix needs dim >= 1");
  if (lower_.size() != dim_ * dim_) fail(ErrorCode::DimensionMismatch, "Cholesky factor has wrong size");
  for (std::size_t i = 0; i < dim_; ++i) {
    if (!(lower_[i * dim_ + i] > 0.0)) fail(ErrorCode::NotPositiveDefinite, "non-positive Cholesky diagonal");
    for (std::size_t j = i + 1; j < dim_; ++j) lower_[i * dim_ + j] = 0.0;
  }
}

SpdMatrix SpdMatrix::identity(std::size_t dim) { return SpdMatrix(dim, Matrix::identity(dim).data); }

Matrix SpdMatrix::to_matrix() const {
  Matrix m(dim_, dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= j; ++k) s += chol(i, k) * chol(j, k);
      m(i, j) = s;
      m(j, i) = s;
    }
  }
  return m;
}

double SpdMatrix::log_det() const {
  double s = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) s += std::log(chol(i, i));
  return 2.0 * s;
}

double SpdMatrix::trace() const {
  double s = 0.0;
  for (double x : lower_) s += x * x;
  return s;
}

SpdMatrix SpdMatrix::scaled(double c) const {
  if (!(c > 0.0)) fail(ErrorCode::DomainError, "SPD scale factor must be positive");
  const double r = std::sqrt(c);
  std::vector<double> l = lower_;
  for (double& x : l) x *= r;
  return SpdMatrix(dim_, std::move(l));
}

SpdMatrix cholesky(const Matrix& m) {
  if (m.rows != m.cols || m.rows == 0) fail(ErrorCode::DimensionMismatch, "cholesky needs a square matrix");
  const std::size_t n = m.rows;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(m(i, j) - m(j, i)) > kSymmetryTol) fail(ErrorCode::DomainError, "matrix is not symmetric");

  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = m(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l[j * n + k] * l[j * n + k];
    if (!(pivot > kPivotFloor))
      fail(ErrorCode::NotPositiveDefinite, "pivot " + std::to_string(pivot) + " at column " + std::to_string(j));
    const double ljj = std::sqrt(pivot);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return SpdMatrix(n, std::move(l));
}

Vector forward_substitute(const SpdMatrix& m, std::span<const double> v) {
  const std::size_t n = m.dim();
  if (v.size() != n) fail(ErrorCode::DimensionMismatch, "vector length differs from matrix dim");
  Vector z(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = v[i];
    for (std::size_t k = 0; k < i; ++k) s -= m.chol(i, k) * z[k];
    z[i] = s / m.chol(i, i);
  }
  return z;
}

Vector spd_solve(const SpdMatrix& m, std::span<const double> v) {
  const std::size_t n = m.dim();
  Vector x = forward_substitute(m, v);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = x[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= m.chol(k, ii) * x[k];
    x[ii] = s / m.chol(ii, ii);
  }
  return x;
}

Vector mat_vec(const Matrix& m, std::span<const double> v) {
  if (v.size() != m.cols) fail(ErrorCode::DimensionMismatch, "mat_vec shape mismatch");
  Vector out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) out[i] += m(i, j) * v[j];
  return out;
}

namespace {

// Lanczos approximation, g = 607/128, 14 terms.
constexpr std::array<double, 14> kLanczos = {
    57.1562356658629235,     -59.5979603554754912,    14.1360979747417471,     -0.491913816097620199,
    .339946499848118887e-4,  .465236289270485756e-4,  -.983744753048795646e-4, .158088703224912494e-3,
    -.210264441724104883e-3, .217439618115212643e-3,  -.164318106536763890e-3, .844182239838527433e-4,
    -.261908384015814087e-4, .368991826595316234e-5};

double lanczos_log_gamma(double x) {
  double y = x;
  const double t = x + 5.24218750000000000;
  const double head = (x + 0.5) * std::log(t) - t;
  double ser = 0.999999999999997092;
  for (double c : kLanczos) ser += c / ++y;
  return head + std::log(2.5066282746310005 * ser / x);
}

// Continued fraction for I_x(a, b), modified Lentz.
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 20000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

double log_beta(double a, double b) { return log_gamma(a) + log_gamma(b) - log_gamma(a + b); }

// I_x(a, b) with y = 1 - x supplied separately so callers can keep precision near 1.
double ibeta(double a, double b, double x, double y) {
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double log_front = a * std::log(x) + b * std::log(y) - log_beta(a, b);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::clamp(std::exp(log_front) * beta_continued_fraction(a, b, x) / a, 0.0, 1.0);
  }
  return std::clamp(1.0 - std::exp(log_front) * beta_continued_fraction(b, a, y) / b, 0.0, 1.0);
}

double log_beta_density(double a, double b, double x) {
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - log_beta(a, b);
}

void check_ab(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b))
    fail(ErrorCode::DomainError, "beta shape parameters must be positive");
}

void check_f(int d1, double d2) {
  if (d1 < 1 || !(d2 > 0.0) || !std::isfinite(d2)) fail(ErrorCode::DomainError, "F law needs d1 >= 1, d2 > 0");
}

}  // namespace

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  if (a > -pi && a <= pi) return a;
  double r = std::remainder(a, 2.0 * pi);
  if (r <= -pi) r += 2.0 * pi;
  return r;
}

double log_gamma(double x) {
  if (!(x > 0.0) || std::isnan(x)) fail(ErrorCode::DomainError, "log_gamma needs x > 0");
  if (std::isinf(x)) return x;
  if (x == 1.0 || x == 2.0) return 0.0;
  if (x < 0.5) {
    // reflection: Γ(x)Γ(1−x) = π / sin(πx)
    return std::log(std::numbers::pi / std::sin(std::numbers::pi * x)) - lanczos_log_gamma(1.0 - x);
  }
  return lanczos_log_gamma(x);
}

double digamma(double x) {
  if (!(x > 0.0)) fail(ErrorCode::DomainError, "digamma needs x > 0");
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return acc + std::log(x) - 0.5 * inv - series;
}

double regularized_incomplete_beta(double a, double b, double x) {
  check_ab(a, b);
  if (!(x >= 0.0 && x <= 1.0)) fail(ErrorCode::DomainError, "incomplete beta needs x in [0, 1]");
  return ibeta(a, b, x, 1.0 - x);
}

double inverse_incomplete_beta(double a, double b, double p) {
  check_ab(a, b);
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::DomainError, "probability must lie in [0, 1]");
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;

  double lo = 0.0;
  double hi = 1.0;
  double x = 0.5;
  // Bracket first; the CDF is monotone so bisection always converges.
  for (int i = 0; i < 60; ++i) {
    x = 0.5 * (lo + hi);
    const double v = ibeta(a, b, x, 1.0 - x);
    if (v < p) lo = x; else hi = x;
    if (hi - lo < 1e-4 * std::max(x, 1e-300)) break;
  }
  // Safeguarded Newton refinement inside the bracket.
  for (int i = 0; i < 200; ++i) {
    const double v = ibeta(a, b, x, 1.0 - x);
    const double r = v - p;
    if (std::abs(r) <= 1e-15) break;
    if (r < 0.0) lo = x; else hi = x;
    const double dens = std::exp(log_beta_density(a, b, x));
    double next = (dens > 0.0 && std::isfinite(dens)) ? x - r / dens : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == x || hi - lo <= std::numeric_limits<double>::min()) break;
    x = next;
  }
  return x;
}

double f_cdf(int d1, double d2, double x) {
  check_f(d1, d2);
  if (std::isnan(x) || x < 0.0) fail(ErrorCode::DomainError, "f_cdf needs x >= 0");
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  const double num = d1 * x;
  const double den = num + d2;
  return ibeta(0.5 * d1, 0.5 * d2, num / den, d2 / den);
}

double f_pdf(int d1, double d2, double x) {
  check_f(d1, d2);
  if (std::isnan(x) || x < 0.0) fail(ErrorCode::DomainError, "f_pdf needs x >= 0");
  if (x == 0.0) return d1 == 2 ? 1.0 : (d1 < 2 ? std::numeric_limits<double>::infinity() : 0.0);
  const double a = 0.5 * d1;
  const double b = 0.5 * d2;
  const double log_pdf = a * std::log(d1 / d2) + (a - 1.0) * std::log(x) - (a + b) * std::log1p(d1 * x / d2) -
                         log_beta(a, b);
  return std::exp(log_pdf);
}

double f_quantile(int d1, double d2, double p) {
  check_f(d1, d2);
  if (!(p >= 0.0 && p < 1.0)) fail(ErrorCode::DomainError, "f_quantile needs p in [0, 1)");
  if (p == 0.0) return 0.0;
  const double a = 0.5 * d1;
  const double b = 0.5 * d2;
  const double ratio = d2 / d1;
  if (p <= 0.5) {
    const double z = inverse_incomplete_beta(a, b, p);
    return ratio * z / (1.0 - z);
  }
  // Solve through the complement so the upper tail keeps relative precision.
  const double w = inverse_incomplete_beta(b, a, 1.0 - p);
  if (w <= 0.0) return std::numeric_limits<double>::infinity();
  return ratio * (1.0 - w) / w;
}

}  // namespace ellipse
