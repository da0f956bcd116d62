#pragma once

// Post-hoc isotonic recalibration of Student-t predictives on PIT values,
// recalibrated ellipsoidal prediction sets, and coverage reports.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ellipse/evidential.hpp"

namespace ellipse {

/// Pool-adjacent-violators: the weighted least-squares nondecreasing fit.
std::vector<double> pav(const std::vector<double>& targets, const std::vector<double>& weights);

class IsotonicMap {
 public:
  IsotonicMap(std::vector<double> knots_u, std::vector<double> values_v);
  static IsotonicMap identity();

  /// 0 below the first knot, linear between knots, last value above the last.
  double operator()(double u) const;

  const std::vector<double>& knots() const noexcept { return knots_; }
  const std::vector<double>& values() const noexcept { return values_; }
  bool operator==(const IsotonicMap&) const = default;

 private:
  std::vector<double> knots_;
  std::vector<double> values_;
};

/// Knots are the sorted unique PITs; targets are empirical-CDF ranks i/n,
/// averaged over ties and weighted by multiplicity.
IsotonicMap fit_pav(const std::vector<double>& pits);

struct RecalibratedLevel {
  double u_star;
  bool unattainable;
};

/// Smallest u with map(u) ≥ p; u = 1 flagged unattainable when map(1) < p.
RecalibratedLevel recalibrated_level(const IsotonicMap& map, double p);

struct PredictionSet {
  Vector center;
  SpdMatrix shape;
  double radius_sq;
  bool degenerate;

  bool contains(std::span<const double> y) const;
};

/// Mahalanobis ball of the predictive holding predictive mass u_star.
/// u_star = 1 yields an unbounded set flagged degenerate.
PredictionSet prediction_set(const StudentTPredictive& t, double u_star);

inline const std::vector<double> kStandardLevels{0.5, 0.8, 0.9, 0.95};

/// One map per horizon slot, or a single pooled map shared by all slots.
struct Recalibration {
  bool per_slot = false;
  std::vector<IsotonicMap> maps;

  const IsotonicMap& for_slot(int slot) const;
  static Recalibration identity();
};

Recalibration fit_recalibration(const std::vector<double>& pits, const std::vector<int>& slots, bool per_slot,
                                int num_slots);

struct CoverageReport {
  std::vector<double> levels;
  std::vector<double> coverage;
  double calibration_error = 0.0;
};

/// Fraction of truths inside the level-p prediction set for each level; with
/// a map the set uses the recalibrated level instead of p.
CoverageReport coverage_report(const std::vector<StudentTPredictive>& predictives, const std::vector<Vector>& truths,
                               const IsotonicMap* map, const std::vector<double>& levels);

/// Same, selecting a map per sample by its horizon slot.
CoverageReport coverage_report(const std::vector<StudentTPredictive>& predictives, const std::vector<Vector>& truths,
                               const std::vector<int>& slots, const Recalibration* recal,
                               const std::vector<double>& levels);

struct CalibrationArtifact {
  Recalibration recal;
  std::string split_hash;
  std::size_t n = 0;
};

std::string calibration_to_json(const CalibrationArtifact& artifact);
CalibrationArtifact calibration_from_json(const std::string& text);
void save_calibration(const CalibrationArtifact& artifact, const std::filesystem::path& path);
CalibrationArtifact load_calibration(const std::filesystem::path& path);

}  // namespace ellipse
