#pragma once

// MPPI waypoint tracking for a unicycle, with confidence-weighted tracking
// costs and a precision-weighted, decaying buffer of past predictions.

#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "ellipse/numerics.hpp"
#include "ellipse/rng.hpp"

namespace ellipse {

struct RobotState {
  double x = 0.0, y = 0.0, theta = 0.0, v = 0.0;
};

struct Control {
  double v = 0.0;
  double omega = 0.0;
};

struct WaypointPrediction {
  Vector mean;
  SpdMatrix cov;
};

struct SlotBelief {
  Vector mean;
  SpdMatrix cov;
  int age = 0;
};

struct WaypointBelief {
  std::vector<SlotBelief> slots;

  bool empty() const noexcept { return slots.empty(); }
  /// One planner tick without new information.
  void tick();
  /// Slides every buffered mean forward along the polyline through the slot
  /// means (extended past the last slot) so that slot k keeps meaning "k-th
  /// waypoint ahead" after the robot has advanced by `distance`.
  void advance(double distance);
};

/// Precision-weighted fusion; an empty belief adopts the predictions verbatim.
WaypointBelief fuse(const WaypointBelief& belief, const std::vector<WaypointPrediction>& preds, double gamma);

/// Belief holding exactly the given predictions (fusion disabled).
WaypointBelief replace(const std::vector<WaypointPrediction>& preds);

struct CostWeights {
  double tracking = 0.1;
  double effort = 0.3;
  double corridor = 10.0;
  /// Mahalanobis tracking instead of 1/trace confidence weights.
  bool mahalanobis = false;
};

struct Corridor {
  double center_y = 0.0;
  double half_width = std::numeric_limits<double>::infinity();
};

struct MppiConfig {
  int rollouts = 256;
  int horizon = 30;
  double dt = 0.1;
  double lambda = 1.0;
  double noise_v = 0.3;
  double noise_omega = 0.3;
  double v_max = 1.0;
  double omega_max = 1.5;
  CostWeights weights;
  double gamma = 0.9;
  double confidence_floor = 1e-3;

  void validate() const;
};

/// Unicycle integration; v = clamp(v_cmd) and ω = clamp(ω_cmd), each step
/// advanced along its exact arc (a straight segment when ω = 0).
std::vector<RobotState> rollout(const RobotState& state, const std::vector<Control>& controls, double dt,
                                double v_max = std::numeric_limits<double>::infinity(),
                                double omega_max = std::numeric_limits<double>::infinity());

double confidence_weight(const SpdMatrix& cov, double floor);

double trajectory_cost(const std::vector<RobotState>& traj, const std::vector<Control>& controls,
                       const WaypointBelief& belief, const Corridor& corridor, const CostWeights& weights,
                       double confidence_floor);

struct MppiDiagnostics {
  std::vector<double> costs;
  std::vector<double> weights;
  double weight_sum = 0.0;
  double min_cost = 0.0;
  double mean_cost = 0.0;
  int best_index = 0;
};

struct MppiResult {
  std::vector<Control> nominal;
  Control applied;
  MppiDiagnostics diagnostics;
};

using RolloutCost = std::function<double(const std::vector<RobotState>&, const std::vector<Control>&)>;

/// One MPPI update with an arbitrary rollout cost. Noise is drawn serially
/// from `rng`; rollouts are scored in parallel.
MppiResult mppi_update(const RobotState& state, const std::vector<Control>& nominal, const MppiConfig& config,
                       Rng& rng, const RolloutCost& cost);
/// Single-threaded reference for mppi_update.
MppiResult mppi_update_serial(const RobotState& state, const std::vector<Control>& nominal, const MppiConfig& config,
                              Rng& rng, const RolloutCost& cost);

MppiResult mppi_step(const RobotState& state, const std::vector<Control>& nominal, const WaypointBelief& belief,
                     const Corridor& corridor, const MppiConfig& config, Rng& rng);

/// Receding-horizon warm start: drop the first control and append the last
/// speed with zero turn rate, so an unconstrained tail cannot accumulate a curl.
std::vector<Control> shift_nominal(const std::vector<Control>& nominal);

struct TrajectoryRecord {
  int tick = 0;
  RobotState state;
  Control applied;
  std::vector<Vector> slot_means;
  std::vector<double> slot_traces;
  double min_cost = 0.0;
  double mean_cost = 0.0;
};

void write_trajectory_csv(const std::vector<TrajectoryRecord>& records, const std::filesystem::path& path);

}  // namespace ellipse
