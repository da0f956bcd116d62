#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ellipse/error.hpp"
#include "ellipse/evidential.hpp"
#include "stats_helpers.hpp"

using namespace ellipse;
using ellipse::testing::ks_statistic;
using ellipse::testing::sample_student_t;

namespace {

NIWParams make_niw(Vector mu, double kappa, const Matrix& psi, double nu) {
  return NIWParams{std::move(mu), kappa, cholesky(psi), nu};
}

// Independent bivariate Student-t density using an explicit 2x2 inverse.
double student2_log_density(const Vector& loc, const Matrix& s, double dof, const Vector& y) {
  const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
  const double r0 = y[0] - loc[0], r1 = y[1] - loc[1];
  const double m2 = (s(1, 1) * r0 * r0 - 2 * s(0, 1) * r0 * r1 + s(0, 0) * r1 * r1) / det;
  return std::lgamma((dof + 2) / 2) - std::lgamma(dof / 2) - std::log(dof * std::numbers::pi) - 0.5 * std::log(det) -
         (dof + 2) / 2 * std::log(1 + m2 / dof);
}

}  // namespace

TEST_CASE("predictive from NIW evidence") {
  const StudentTPredictive t = predictive(make_niw({0, 0}, 2.0, Matrix::identity(2), 4.0));
  CHECK(t.dof == doctest::Approx(3.0));
  const Matrix s = t.scale.to_matrix();
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(1, 1) == doctest::Approx(0.5));
  CHECK(s(0, 1) == doctest::Approx(0.0));

  const StudentTPredictive t1 = predictive(make_niw({1.5}, 1.0, Matrix(1, 1, {2.0}), 2.0));
  CHECK(t1.dof == doctest::Approx(2.0));
  CHECK(t1.scale.to_matrix()(0, 0) == doctest::Approx(2.0));
  CHECK(t1.loc[0] == 1.5);

  const Matrix psi(2, 2, {2.0, 0.3, 0.3, 1.0});
  const StudentTPredictive big = predictive(make_niw({0, 0}, 1e9, psi, 6.0));
  const Matrix lim = psi * (1.0 / 5.0);
  const Matrix got = big.scale.to_matrix();
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(got.data[i] - lim.data[i]) < 1e-6);
}

TEST_CASE("predictive rejects degenerate evidence") {
  NIWParams bad{{0.0, 0.0}, 1.0, SpdMatrix::identity(2), 0.5};
  CHECK_THROWS_AS(predictive(bad), Error);
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("mahalanobis_sq") {
  const StudentTPredictive t{{1.0, -1.0}, SpdMatrix::identity(2), 4.0};
  CHECK(mahalanobis_sq(t, Vector{1.0, -1.0}) == 0.0);
  CHECK(mahalanobis_sq(t, Vector{4.0, 3.0}) == doctest::Approx(25.0));
  const StudentTPredictive u{{0.0, 0.0}, cholesky(Matrix(2, 2, {4, 2, 2, 3})), 4.0};
  CHECK(mahalanobis_sq(u, Vector{1.0, 0.0}) == doctest::Approx(0.375).epsilon(1e-14));
  CHECK_THROWS_AS(mahalanobis_sq(u, Vector{1.0}), Error);
}

TEST_CASE("log_pdf examples") {
  const StudentTPredictive cauchy{{0.0}, SpdMatrix::identity(1), 1.0};
  CHECK(log_pdf(cauchy, Vector{0.0}) == doctest::Approx(std::log(1.0 / std::numbers::pi)).epsilon(1e-14));

  const StudentTPredictive near_gauss{{0.0, 0.0}, SpdMatrix::identity(2), 50.0};
  const Vector y{0.5, 0.5};
  const double gauss = -std::log(2 * std::numbers::pi) - 0.5 * (0.25 + 0.25);
  CHECK(std::abs(log_pdf(near_gauss, y) - gauss) < 2e-2);

  const StudentTPredictive t{{0.3, -0.2}, cholesky(Matrix(2, 2, {1.2, 0.4, 0.4, 0.8})), 5.0};
  const double h = 0.02;
  double mass = 0.0;
  Vector p(2);
  for (double x = -20 + h / 2; x < 20; x += h)
    for (double z = -20 + h / 2; z < 20; z += h) {
      p[0] = x;
      p[1] = z;
      mass += std::exp(log_pdf(t, p));
    }
  mass *= h * h;
  CHECK(std::abs(mass - 1.0) <= 1e-3);
}

TEST_CASE("d = 1 agrees with the univariate Student-t density") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 5.0);
  std::uniform_real_distribution<double> uy(-6.0, 6.0);
  for (int i = 0; i < 500; ++i) {
    const double kappa = u(rng), nu = 0.01 + u(rng) * 4, psi = u(rng), mu = uy(rng), y = uy(rng);
    const NIWParams niw = make_niw({mu}, kappa, Matrix(1, 1, {psi}), nu);
    const double dof = nu;
    const double sigma2 = psi * (kappa + 1) / (kappa * dof);
    const double z2 = (y - mu) * (y - mu) / sigma2;
    const double ref = std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2) - 0.5 * std::log(dof * std::numbers::pi * sigma2) -
                       (dof + 1) / 2 * std::log1p(z2 / dof);
    CHECK(std::abs(log_pdf(predictive(niw), Vector{y}) - ref) <= 1e-10 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("PIT") {
  const StudentTPredictive t{{1.0, 2.0}, cholesky(Matrix(2, 2, {0.5, 0.1, 0.1, 0.3})), 4.5};
  CHECK(pit(t, t.loc) == 0.0);

  double prev = 0.0;
  for (double s = 0.0; s < 30.0; s += 0.1) {
    const double u = pit(t, Vector{1.0 + 0.3 * s, 2.0 - 0.7 * s});
    CHECK(u >= prev);
    CHECK(u <= 1.0);
    prev = u;
  }

  std::mt19937_64 rng(2024);
  std::vector<double> u;
  for (int i = 0; i < 10000; ++i) u.push_back(pit(t, sample_student_t(t, rng)));
  const double d = ks_statistic(u);
  MESSAGE("KS statistic " << d);
  CHECK(d < 0.02);
}

TEST_CASE("nll and evidential loss") {
  const NIWParams niw = make_niw({0.2, -0.4}, 1.7, Matrix(2, 2, {0.9, 0.2, 0.2, 0.6}), 3.3);
  const Vector y{0.8, 0.1};
  CHECK(evidential_loss(niw, y, 0.0) == nll(niw, y));
  CHECK(evidential_loss(niw, niw.mu, 0.5) == nll(niw, niw.mu));

  const StudentTPredictive t = predictive(niw);
  const double ref = -student2_log_density(t.loc, t.scale.to_matrix(), t.dof, y);
  CHECK(nll(niw, y) == doctest::Approx(ref).epsilon(1e-12));
  const double reg = 0.01 * (0.6 + 0.5) * (1.7 + 3.3);
  CHECK(evidential_loss(niw, y, 0.01) == doctest::Approx(ref + reg).epsilon(1e-12));
}

TEST_CASE("evidential loss is continuous in its parameters") {
  const Vector y{0.8, 0.1};
  auto loss = [&](double kappa, double nu, double l00, double l10, double l11, double m0) {
    NIWParams niw{{m0, -0.4}, kappa, SpdMatrix(2, {l00, 0.0, l10, l11}), nu};
    return evidential_loss(niw, y, kDefaultLambdaReg);
  };
  const double base[6] = {1.7, 3.3, 0.9, 0.2, 0.7, 0.2};
  for (int k = 0; k < 6; ++k) {
    for (double scale : {0.5, 1.0, 2.0}) {
      double p[6];
      std::copy(base, base + 6, p);
      p[k] *= scale;
      const double f0 = loss(p[0], p[1], p[2], p[3], p[4], p[5]);
      p[k] += 1e-6;
      const double f1 = loss(p[0], p[1], p[2], p[3], p[4], p[5]);
      CHECK(std::abs(f1 - f0) <= 1e-3);
    }
  }
}
