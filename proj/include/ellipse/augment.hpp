#pragma once

// Synthetic stair worlds, LiDAR-style ray casting, and viewpoint/pose
// augmentation of expert demonstrations with corrective waypoint labels.
//
// World frame: x climbs the stair, y is lateral (centreline at y = 0), z up.
// Waypoint labels live in the gravity-aligned body frame (yaw only), point
// clouds in the full sensor frame (yaw, pitch, roll).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ellipse/numerics.hpp"
#include "ellipse/rng.hpp"

namespace ellipse {

struct StairWorld {
  double step_rise = 0.17;
  double step_run = 0.3;
  int num_steps = 8;
  double stair_width = 1.2;
  double lower_landing = 1.2;
  double upper_landing = 1.5;
  bool lateral_walls = true;

  void validate() const;

  double top_start() const { return (num_steps - 1) * step_run; }
  double top_end() const { return top_start() + upper_landing; }
  double top_height() const { return num_steps * step_rise; }
  double start_x() const { return -lower_landing + 0.3; }
  double goal_x() const { return top_start() + 0.5 * upper_landing; }
  /// Height of the walking surface below (x, y); the floor plane is z = 0.
  double terrain_height(double x, double y) const;
};

struct Box {
  std::array<double, 3> lo;
  std::array<double, 3> hi;
};

/// Solid geometry of a world: an infinite floor at z = 0 plus boxes.
struct StairGeometry {
  std::vector<Box> boxes;
  bool infinite_floor = true;

  static StairGeometry from_world(const StairWorld& world);
  static StairGeometry flat_floor();

  /// Distance along a unit ray to the first surface, if within max_range.
  std::optional<double> cast(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                             double max_range) const;
  bool penetrates(const std::array<double, 3>& p) const;
};

struct Pose {
  double x = 0.0, y = 0.0, z = 0.0;
  double yaw = 0.0, pitch = 0.0, roll = 0.0;

  bool operator==(const Pose&) const = default;
  /// Sensor-to-world rotation Rz(yaw)·Ry(pitch)·Rx(roll), row-major.
  std::array<double, 9> rotation() const;
};

struct PoseDelta {
  double dx = 0.0, dy = 0.0, dz = 0.0;
  double dyaw = 0.0, dpitch = 0.0, droll = 0.0;

  bool is_identity() const {
    return dx == 0.0 && dy == 0.0 && dz == 0.0 && dyaw == 0.0 && dpitch == 0.0 && droll == 0.0;
  }
};

/// Translation applied in the yaw-aligned body frame; angles add and wrap.
Pose compose(const Pose& pose, const PoseDelta& delta);

/// Planar frame changes for waypoints.
std::array<double, 2> to_body(const Pose& pose, double wx, double wy);
std::array<double, 2> to_world(const Pose& pose, double bx, double by);

struct PointCloud {
  std::vector<std::array<double, 3>> points;
};

struct SensorConfig {
  int azimuth_bins = 64;
  int elevation_bins = 16;
  double max_range = 8.0;
  double elevation_min = -0.785398163397448;  // -45°
  double elevation_max = 0.261799387799159;   // +15°
};

/// One ray per (azimuth, elevation) bin; hits are returned in the sensor frame
/// ordered by (elevation, azimuth). Rays run in parallel.
PointCloud render_cloud(const StairGeometry& geometry, const Pose& pose, const SensorConfig& sensor);
PointCloud render_cloud(const StairWorld& world, const Pose& pose, const SensorConfig& sensor);
/// Single-threaded reference for render_cloud.
PointCloud render_cloud_serial(const StairGeometry& geometry, const Pose& pose, const SensorConfig& sensor);

struct ExpertConfig {
  int waypoints = 8;
  double waypoint_spacing = 0.3;
  double pose_spacing = 0.25;
  double sensor_height = 0.55;
};

struct Demonstration {
  Pose pose;
  PointCloud cloud;
  /// waypoints × 2 (forward, lateral) in the body frame, row-major
  std::vector<double> waypoints;
  bool augmented = false;
  int world_index = 0;
};

struct ExpertFrame {
  Pose pose;
  std::vector<double> waypoints;
};

/// Centreline sample at horizontal arclength s from the start pose.
std::array<double, 2> centerline_point(const StairWorld& world, double s);

/// Poses marching up the centreline; each label holds the next H centreline
/// points in that pose's body frame.
std::vector<ExpertFrame> expert_trajectory(const StairWorld& world, const ExpertConfig& config);

struct PerturbationBounds {
  double dx = 0.15, dy = 0.15, dz = 0.05;
  double dyaw = 0.15, dpitch = 0.05, droll = 0.05;
};

PoseDelta sample_perturbation(Rng& rng, const PerturbationBounds& bounds);

/// Re-renders from the perturbed pose and re-expresses the original
/// world-frame waypoints in the perturbed body frame.
Demonstration augment(const StairWorld& world, const Demonstration& demo, const PoseDelta& delta,
                      const SensorConfig& sensor);

struct GridConfig {
  int cells_x = 16;
  int cells_y = 24;
  double extent_x = 4.0;
  double extent_y = 3.0;

  int feature_size() const { return 2 * cells_x * cells_y; }
};

/// Per cell (max point height, occupancy), row-major over (x cell, y cell).
/// Covers x ∈ [0, extent_x) and y ∈ [−extent_y/2, extent_y/2) in the sensor frame.
std::vector<double> featurize(const PointCloud& cloud, const GridConfig& grid);

struct WorldRanges {
  std::array<double, 2> rise{0.12, 0.18};
  std::array<double, 2> run{0.26, 0.34};
  std::array<int, 2> steps{6, 12};
  std::array<double, 2> width{1.0, 1.4};
  std::array<double, 2> lower_landing{1.0, 1.5};
  std::array<double, 2> upper_landing{1.2, 1.8};

  void validate() const;
  /// True when the two ranges share no value in at least one parameter.
  static bool disjoint(const WorldRanges& a, const WorldRanges& b);
};

StairWorld sample_world(Rng& rng, const WorldRanges& ranges);

inline constexpr int kDatasetSchemaVersion = 1;

struct DatasetHeader {
  std::string split;
  GridConfig grid;
  SensorConfig sensor;
  ExpertConfig expert;
  std::vector<StairWorld> worlds;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Demonstration> demos;
};

/// JSON-lines: one header record, then one record per demonstration.
/// Cloud coordinates are stored at 0.1 mm resolution.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Rounds cloud coordinates to the stored resolution.
void quantize_cloud(PointCloud& cloud);

}  // namespace ellipse
