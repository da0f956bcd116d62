#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "ellipse/calibrate.hpp"
#include "ellipse/error.hpp"
#include "pav_oracle.hpp"
#include "stats_helpers.hpp"

using namespace ellipse;
using ellipse::testing::brute_force_isotonic;
using ellipse::testing::ks_statistic;
using ellipse::testing::sample_student_t;

namespace {

StudentTPredictive random_predictive(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = 0.05 + 0.3 * u(rng);
  const double b = 0.05 + 0.3 * u(rng);
  const double c = 0.1 * (u(rng) - 0.5);
  return {{4.0 * (u(rng) - 0.5), 4.0 * (u(rng) - 0.5)}, SpdMatrix(2, {a, 0.0, c, b}), 3.0 + 20.0 * u(rng)};
}

struct Split {
  std::vector<StudentTPredictive> predictives;
  std::vector<Vector> truths;
};

// Truths drawn from `true_t`; the reported predictive has its scale shrunk.
Split make_split(std::mt19937_64& rng, int n, double scale_factor) {
  Split s;
  for (int i = 0; i < n; ++i) {
    const auto t = random_predictive(rng);
    s.truths.push_back(sample_student_t(t, rng));
    s.predictives.push_back({t.loc, t.scale.scaled(scale_factor), t.dof});
  }
  return s;
}

std::vector<double> pits_of(const Split& s) {
  std::vector<double> u;
  for (std::size_t i = 0; i < s.truths.size(); ++i) u.push_back(pit(s.predictives[i], s.truths[i]));
  return u;
}

}  // namespace

TEST_CASE("pav pools violators and fixes monotone inputs") {
  const auto f = pav({0.8, 0.2}, {1.0, 1.0});
  CHECK(f[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(f[1] == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> mono{0.1, 0.1, 0.3, 0.7, 0.9};
  CHECK(pav(mono, std::vector<double>(5, 1.0)) == mono);
  const auto w = pav({1.0, 0.0}, {3.0, 1.0});
  CHECK(w[0] == doctest::Approx(0.75));
  CHECK(w[1] == doctest::Approx(0.75));
  CHECK(pav({}, {}).empty());
  CHECK_THROWS_AS(pav({0.1}, {0.0}), Error);
  CHECK_THROWS_AS(pav({0.1, 0.2}, {1.0}), Error);
}

TEST_CASE("pav matches brute-force isotonic fits on every short grid sequence") {
  for (std::size_t n = 1; n <= 5; ++n) {
    std::vector<int> digits(n, 0);
    while (true) {
      std::vector<double> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = 0.1 * digits[i];
      const auto fit = pav(y, std::vector<double>(n, 1.0));
      const auto oracle = brute_force_isotonic(y);
      for (std::size_t i = 0; i < n; ++i) REQUIRE(std::abs(fit[i] - oracle[i]) < 1e-12);
      std::size_t k = 0;
      while (k < n && ++digits[k] == 11) digits[k++] = 0;
      if (k == n) break;
    }
  }
}

TEST_CASE("fit_pav knots, tie averaging, and insufficient data") {
  const auto m = fit_pav({0.9, 0.2, 0.5, 0.2});
  CHECK(m.knots() == std::vector<double>{0.2, 0.5, 0.9});
  REQUIRE(m.values().size() == 3);
  CHECK(m.values()[0] == doctest::Approx(0.375));
  CHECK(m.values()[1] == doctest::Approx(0.75));
  CHECK(m.values()[2] == doctest::Approx(1.0));
  CHECK(m(0.1) == 0.0);
  CHECK(m(0.35) == doctest::Approx(0.5625));
  CHECK(m(0.95) == 1.0);
  try {
    fit_pav({0.3});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientData);
  }
  CHECK_THROWS_AS(fit_pav({0.3, 1.5}), Error);
}

TEST_CASE("uniform PITs give a near-identity map") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> pits(10000);
  for (double& p : pits) p = u(rng);
  const auto m = fit_pav(pits);
  double worst = 0.0;
  for (int i = 0; i <= 1000; ++i) worst = std::max(worst, std::abs(m(i / 1000.0) - i / 1000.0));
  CHECK(worst <= 0.03);
  for (std::size_t i = 1; i < m.values().size(); ++i) CHECK(m.values()[i] >= m.values()[i - 1]);
}

TEST_CASE("applying the map to its own PITs gives near-uniform values") {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double shape : {0.3, 1.0, 5.0}) {
    std::vector<double> pits(3000);
    for (double& p : pits) p = std::pow(u(rng), 1.0 / shape);
    const auto m = fit_pav(pits);
    std::vector<double> mapped;
    for (double p : pits) mapped.push_back(m(p));
    CHECK(ks_statistic(mapped) < 0.05);
  }
}

TEST_CASE("recalibrated_level inverts the map") {
  const auto id = IsotonicMap::identity();
  for (double p : {0.1, 0.5, 0.9, 0.95}) {
    const auto r = recalibrated_level(id, p);
    CHECK(r.u_star == p);
    CHECK_FALSE(r.unattainable);
  }
  // Overconfident model: Beta(5, 1) PITs pile up near 1.
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> pits(5000);
  for (double& p : pits) p = std::pow(u(rng), 0.2);
  const auto m = fit_pav(pits);
  CHECK(recalibrated_level(m, 0.9).u_star > 0.9);
  CHECK(recalibrated_level(m, 0.9).u_star == doctest::Approx(std::pow(0.9, 0.2)).epsilon(0.01));

  const IsotonicMap boundary({0.3, 0.6, 0.9}, {0.4, 0.7, 0.8});
  CHECK(recalibrated_level(boundary, 0.2).u_star == 0.3);
  CHECK(recalibrated_level(boundary, 0.4).u_star == 0.3);
  CHECK(recalibrated_level(boundary, 0.55).u_star == doctest::Approx(0.45));
  const auto un = recalibrated_level(boundary, 0.85);
  CHECK(un.u_star == 1.0);
  CHECK(un.unattainable);
  CHECK_THROWS_AS(recalibrated_level(boundary, 0.0), Error);
  CHECK_THROWS_AS(recalibrated_level(boundary, 1.0), Error);

  double prev = 0.0;
  for (int i = 1; i < 1000; ++i) {
    const double p = i / 1000.0;
    const auto r = recalibrated_level(m, p);
    CHECK(r.u_star >= prev);
    prev = r.u_star;
    CHECK(m(r.u_star) >= p - 1e-12);
    if (r.u_star > m.knots().front() + 1e-9) CHECK(m(r.u_star - 1e-9) < p);
  }
}

TEST_CASE("prediction sets hold their nominal predictive mass") {
  std::mt19937_64 rng(53);
  const StudentTPredictive t{{0.5, -0.2}, SpdMatrix(2, {0.4, 0.0, 0.1, 0.3}), 4.5};
  const auto zero = prediction_set(t, 0.0);
  CHECK(zero.radius_sq == 0.0);
  CHECK(zero.contains(t.loc));
  CHECK_FALSE(zero.contains(Vector{0.5 + 1e-6, -0.2}));
  const int n = 20000;
  std::vector<Vector> samples;
  for (int i = 0; i < n; ++i) samples.push_back(sample_student_t(t, rng));
  for (double u : {0.25, 0.5, 0.8, 0.9, 0.95}) {
    const auto set = prediction_set(t, u);
    int inside = 0;
    for (const auto& y : samples) inside += set.contains(y) ? 1 : 0;
    CHECK(std::abs(static_cast<double>(inside) / n - u) <= 0.01);
  }
  double prev = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double r = prediction_set(t, i / 1000.0).radius_sq;
    CHECK(r >= prev);
    prev = r;
  }
  const auto full = prediction_set(t, 1.0);
  CHECK(full.degenerate);
  CHECK(std::isinf(full.radius_sq));
  CHECK_THROWS_AS(prediction_set(t, 1.5), Error);
}

TEST_CASE("recalibrated radius is nondecreasing in the nominal level") {
  std::mt19937_64 rng(59);
  const auto cal = make_split(rng, 2000, 0.5);
  const auto m = fit_pav(pits_of(cal));
  const auto& t = cal.predictives.front();
  double prev = 0.0;
  for (int i = 1; i < 1000; ++i) {
    const auto r = recalibrated_level(m, i / 1000.0);
    const double rad = prediction_set(t, r.u_star).radius_sq;
    CHECK(rad >= prev);
    prev = rad;
  }
}

TEST_CASE("coverage of self-consistent predictives matches the nominal level") {
  std::mt19937_64 rng(61);
  const auto s = make_split(rng, 5000, 1.0);
  const auto report = coverage_report(s.predictives, s.truths, nullptr, kStandardLevels);
  REQUIRE(report.coverage.size() == kStandardLevels.size());
  for (std::size_t i = 0; i < kStandardLevels.size(); ++i) {
    CHECK(std::abs(report.coverage[i] - kStandardLevels[i]) <= 0.02);
  }
  CHECK(report.calibration_error <= 0.02);
  const auto id = IsotonicMap::identity();
  const auto with_id = coverage_report(s.predictives, s.truths, &id, kStandardLevels);
  CHECK(with_id.coverage == report.coverage);
  CHECK(with_id.calibration_error == report.calibration_error);
  CHECK(coverage_report(s.predictives, s.truths, nullptr, {}).coverage.empty());
  try {
    coverage_report({}, {}, nullptr, kStandardLevels);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
}

TEST_CASE("isotonic recalibration repairs shrunken predictive scales") {
  std::mt19937_64 rng(67);
  // Shrinking the scale by 0.25 per axis multiplies the scale matrix by 1/16.
  const auto cal = make_split(rng, 5000, 0.0625);
  const auto eval = make_split(rng, 5000, 0.0625);
  const std::vector<double> level{0.9};
  const auto before = coverage_report(eval.predictives, eval.truths, nullptr, level);
  CHECK(before.coverage[0] <= 0.6);
  const auto m = fit_pav(pits_of(cal));
  const auto after = coverage_report(eval.predictives, eval.truths, &m, level);
  CHECK(std::abs(after.coverage[0] - 0.9) <= 0.03);
  const auto in_sample = coverage_report(cal.predictives, cal.truths, &m, kStandardLevels);
  CHECK(in_sample.calibration_error <= 0.02);
}

TEST_CASE("per-slot and pooled recalibration") {
  std::mt19937_64 rng(71);
  std::vector<double> pits;
  std::vector<int> slots;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 3000; ++i) {
    const int slot = i % 3;
    pits.push_back(std::pow(u(rng), 1.0 / (1.0 + slot)));
    slots.push_back(slot);
  }
  const auto pooled = fit_recalibration(pits, slots, false, 3);
  CHECK(pooled.maps.size() == 1);
  CHECK(&pooled.for_slot(2) == &pooled.maps[0]);
  const auto per = fit_recalibration(pits, slots, true, 3);
  REQUIRE(per.maps.size() == 3);
  CHECK(recalibrated_level(per.for_slot(0), 0.9).u_star < recalibrated_level(per.for_slot(2), 0.9).u_star);
  CHECK_THROWS_AS(per.for_slot(3), Error);
  CHECK_THROWS_AS(fit_recalibration(pits, slots, true, 2), Error);

  const auto s = make_split(rng, 300, 1.0);
  std::vector<int> s_slots(300);
  for (int i = 0; i < 300; ++i) s_slots[static_cast<std::size_t>(i)] = i % 3;
  const auto a = coverage_report(s.predictives, s.truths, s_slots, &pooled, kStandardLevels);
  const auto b = coverage_report(s.predictives, s.truths, &pooled.maps[0], kStandardLevels);
  CHECK(a.coverage == b.coverage);
}

TEST_CASE("calibration artifact round trip") {
  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> pits(500);
  for (double& p : pits) p = u(rng);
  CalibrationArtifact a{fit_recalibration(pits, std::vector<int>(500, 0), true, 1), "abc123", 500};
  const auto path = std::filesystem::temp_directory_path() / "ellipse_test_calibration.json";
  save_calibration(a, path);
  const auto b = load_calibration(path);
  CHECK(b.recal.per_slot);
  REQUIRE(b.recal.maps.size() == 1);
  CHECK(b.recal.maps[0] == a.recal.maps[0]);
  CHECK(b.split_hash == "abc123");
  CHECK(b.n == 500);
  CHECK(calibration_to_json(b) == calibration_to_json(a));
  std::filesystem::remove(path);
  try {
    load_calibration(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingArtifact);
  }
  try {
    calibration_from_json("{\"format\":\"other\",\"version\":1}");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaMismatch);
  }
}
