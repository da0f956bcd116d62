#include "ellipse/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ellipse/error.hpp"

namespace ellipse {

std::vector<double> pav(const std::vector<double>& targets, const std::vector<double>& weights) {
  if (targets.size() != weights.size()) fail(ErrorCode::DimensionMismatch, "pav targets and weights differ in length");
  struct Block {
    double mean;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(weights[i] > 0.0) || !std::isfinite(targets[i])) {
      fail(ErrorCode::DomainError, "pav needs finite targets and positive weights");
    }
    blocks.push_back({targets[i], weights[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
      const Block top = blocks.back();
      blocks.pop_back();
      Block& prev = blocks.back();
      const double w = prev.weight + top.weight;
      prev.mean = (prev.weight * prev.mean + top.weight * top.mean) / w;
      prev.weight = w;
      prev.count += top.count;
    }
  }
  std::vector<double> fit;
  fit.reserve(targets.size());
  for (const Block& b : blocks) fit.insert(fit.end(), b.count, b.mean);
  return fit;
}

IsotonicMap::IsotonicMap(std::vector<double> knots_u, std::vector<double> values_v)
    : knots_(std::move(knots_u)), values_(std::move(values_v)) {
  if (knots_.empty() || knots_.size() != values_.size()) {
    fail(ErrorCode::DimensionMismatch, "isotonic map needs equal, nonzero numbers of knots and values");
  }
  for (std::size_t i = 0; i < knots_.size(); ++i) {
    const bool in_range = knots_[i] >= 0.0 && knots_[i] <= 1.0 && values_[i] >= 0.0 && values_[i] <= 1.0;
    const bool ordered = i == 0 || (knots_[i] >= knots_[i - 1] && values_[i] >= values_[i - 1]);
    if (!in_range || !ordered) fail(ErrorCode::DomainError, "isotonic map must be nondecreasing within [0, 1]");
  }
}

IsotonicMap IsotonicMap::identity() { return IsotonicMap({0.0, 1.0}, {0.0, 1.0}); }

double IsotonicMap::operator()(double u) const {
  if (std::isnan(u)) return u;
  if (u < knots_.front()) return 0.0;
  if (u >= knots_.back()) return values_.back();
  // First knot strictly above u; u lies in [knots_[i-1], knots_[i]).
  const auto it = std::upper_bound(knots_.begin(), knots_.end(), u);
  const auto i = static_cast<std::size_t>(it - knots_.begin());
  const double k0 = knots_[i - 1], k1 = knots_[i];
  const double v0 = values_[i - 1], v1 = values_[i];
  const double v = v0 + (u - k0) / (k1 - k0) * (v1 - v0);
  return std::clamp(v, 0.0, 1.0);
}

IsotonicMap fit_pav(const std::vector<double>& pits) {
  if (pits.size() < 2) fail(ErrorCode::InsufficientData, "isotonic fit needs at least two PIT values");
  std::vector<double> sorted = pits;
  for (double u : sorted) {
    if (!(u >= 0.0 && u <= 1.0)) fail(ErrorCode::DomainError, "PIT values must lie in [0, 1]");
  }
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  std::vector<double> knots, targets, weights;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    // Ranks i+1..j share a knot; their mean ECDF value is (i+1+j)/(2n).
    knots.push_back(sorted[i]);
    targets.push_back(0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)) / n);
    weights.push_back(static_cast<double>(j - i));
    i = j;
  }
  auto fit = pav(targets, weights);
  for (double& v : fit) v = std::clamp(v, 0.0, 1.0);
  return IsotonicMap(std::move(knots), std::move(fit));
}

RecalibratedLevel recalibrated_level(const IsotonicMap& map, double p) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::DomainError, "recalibration level must lie in (0, 1)");
  const auto& k = map.knots();
  const auto& v = map.values();
  if (v.back() < p) return {1.0, true};
  if (p <= v.front()) return {k.front(), false};
  // First value reaching p; the previous one is strictly below it.
  const auto it = std::lower_bound(v.begin(), v.end(), p);
  const auto i = static_cast<std::size_t>(it - v.begin());
  const double u = k[i - 1] + (p - v[i - 1]) / (v[i] - v[i - 1]) * (k[i] - k[i - 1]);
  return {std::clamp(u, k[i - 1], k[i]), false};
}

bool PredictionSet::contains(std::span<const double> y) const {
  if (y.size() != center.size()) fail(ErrorCode::DimensionMismatch, "point and prediction set differ in dimension");
  if (degenerate) return true;
  Vector r(center.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = y[i] - center[i];
  const Vector z = forward_substitute(shape, r);
  double m = 0.0;
  for (double zi : z) m += zi * zi;
  return m <= radius_sq;
}

PredictionSet prediction_set(const StudentTPredictive& t, double u_star) {
  if (!(u_star >= 0.0 && u_star <= 1.0)) fail(ErrorCode::DomainError, "prediction set level must lie in [0, 1]");
  const int d = static_cast<int>(t.dim());
  if (u_star == 1.0) return {t.loc, t.scale, std::numeric_limits<double>::infinity(), true};
  return {t.loc, t.scale, d * f_quantile(d, t.dof, u_star), false};
}

const IsotonicMap& Recalibration::for_slot(int slot) const {
  if (maps.empty()) fail(ErrorCode::InvalidConfig, "recalibration holds no maps");
  if (!per_slot) return maps.front();
  if (slot < 0 || static_cast<std::size_t>(slot) >= maps.size()) {
    fail(ErrorCode::SlotMismatch, "no recalibration map for slot " + std::to_string(slot));
  }
  return maps[static_cast<std::size_t>(slot)];
}

Recalibration Recalibration::identity() { return {false, {IsotonicMap::identity()}}; }

Recalibration fit_recalibration(const std::vector<double>& pits, const std::vector<int>& slots, bool per_slot,
                                int num_slots) {
  if (pits.size() != slots.size()) fail(ErrorCode::DimensionMismatch, "PITs and slot indices differ in length");
  if (!per_slot) return {false, {fit_pav(pits)}};
  if (num_slots < 1) fail(ErrorCode::InvalidConfig, "per-slot recalibration needs at least one slot");
  std::vector<std::vector<double>> grouped(static_cast<std::size_t>(num_slots));
  for (std::size_t i = 0; i < pits.size(); ++i) {
    if (slots[i] < 0 || slots[i] >= num_slots) fail(ErrorCode::SlotMismatch, "slot index out of range");
    grouped[static_cast<std::size_t>(slots[i])].push_back(pits[i]);
  }
  Recalibration r{true, {}};
  for (const auto& g : grouped) r.maps.push_back(fit_pav(g));
  return r;
}

namespace {

CoverageReport coverage_impl(const std::vector<StudentTPredictive>& predictives, const std::vector<Vector>& truths,
                             const std::vector<double>& levels,
                             const std::function<const IsotonicMap*(std::size_t)>& map_of) {
  if (predictives.size() != truths.size()) fail(ErrorCode::DimensionMismatch, "predictives and truths differ in length");
  if (predictives.empty()) fail(ErrorCode::EmptyInput, "coverage report needs at least one prediction");
  CoverageReport report;
  if (levels.empty()) return report;
  report.levels = levels;
  for (double p : levels) {
    std::size_t inside = 0;
    for (std::size_t i = 0; i < predictives.size(); ++i) {
      const IsotonicMap* map = map_of(i);
      const double u = map ? recalibrated_level(*map, p).u_star : p;
      inside += prediction_set(predictives[i], u).contains(truths[i]) ? 1 : 0;
    }
    const double c = static_cast<double>(inside) / static_cast<double>(predictives.size());
    report.coverage.push_back(c);
    report.calibration_error += std::abs(c - p);
  }
  report.calibration_error /= static_cast<double>(levels.size());
  return report;
}

}  // namespace

CoverageReport coverage_report(const std::vector<StudentTPredictive>& predictives, const std::vector<Vector>& truths,
                               const IsotonicMap* map, const std::vector<double>& levels) {
  return coverage_impl(predictives, truths, levels, [map](std::size_t) { return map; });
}

CoverageReport coverage_report(const std::vector<StudentTPredictive>& predictives, const std::vector<Vector>& truths,
                               const std::vector<int>& slots, const Recalibration* recal,
                               const std::vector<double>& levels) {
  if (slots.size() != predictives.size()) fail(ErrorCode::DimensionMismatch, "slot indices and predictives differ");
  return coverage_impl(predictives, truths, levels, [&](std::size_t i) -> const IsotonicMap* {
    return recal ? &recal->for_slot(slots[i]) : nullptr;
  });
}

std::string calibration_to_json(const CalibrationArtifact& a) {
  using nlohmann::json;
  json maps = json::array();
  for (const auto& m : a.recal.maps) {
    json table = json::array();
    for (double p : kStandardLevels) {
      const auto r = recalibrated_level(m, p);
      table.push_back({{"p", p}, {"u_star", r.u_star}, {"unattainable", r.unattainable}});
    }
    maps.push_back({{"knots", m.knots()}, {"values", m.values()}, {"levels", table}});
  }
  const json j{{"format", "ellipse-isotonic-calibration"},
               {"version", 1},
               {"mode", a.recal.per_slot ? "per_slot" : "pooled"},
               {"maps", maps},
               {"metadata", {{"split_hash", a.split_hash}, {"n", a.n}}}};
  return j.dump(1);
}

CalibrationArtifact calibration_from_json(const std::string& text) {
  using nlohmann::json;
  try {
    const json j = json::parse(text);
    if (j.at("format") != "ellipse-isotonic-calibration" || j.at("version") != 1) {
      fail(ErrorCode::SchemaMismatch, "not an ellipse calibration artifact (version 1)");
    }
    CalibrationArtifact a;
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "pooled" && mode != "per_slot") fail(ErrorCode::SchemaMismatch, "unknown calibration mode " + mode);
    a.recal.per_slot = mode == "per_slot";
    for (const auto& m : j.at("maps")) {
      a.recal.maps.emplace_back(m.at("knots").get<std::vector<double>>(), m.at("values").get<std::vector<double>>());
    }
    if (a.recal.maps.empty()) fail(ErrorCode::SchemaMismatch, "calibration artifact holds no maps");
    a.split_hash = j.at("metadata").at("split_hash").get<std::string>();
    a.n = j.at("metadata").at("n").get<std::size_t>();
    return a;
  } catch (const json::exception& ex) {
    fail(ErrorCode::SchemaMismatch, std::string("malformed calibration artifact: ") + ex.what());
  }
}

void save_calibration(const CalibrationArtifact& artifact, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  out << calibration_to_json(artifact);
}

CalibrationArtifact load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingArtifact, "missing calibration artifact " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return calibration_from_json(ss.str());
}

}  // namespace ellipse
