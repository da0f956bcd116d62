#include "ellipse/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ellipse/error.hpp"

namespace ellipse {

namespace {

constexpr double kWallThickness = 0.1;
constexpr double kWallClearance = 1.0;
constexpr double kParallelEps = 1e-15;
constexpr double kHitEps = 1e-12;

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

void StairWorld::validate() const {
  if (!positive_finite(step_rise) || !positive_finite(step_run) || !positive_finite(stair_width) ||
      !positive_finite(upper_landing) || !positive_finite(lower_landing) || lower_landing < 0.3) {
    fail(ErrorCode::InvalidConfig, "stair world dimensions must be positive (lower landing >= 0.3 m)");
  }
  if (step_rise < 0.1 || step_rise > 0.25 || step_run < 0.24 || step_run > 0.4 || num_steps < 4 || num_steps > 20 ||
      stair_width < 0.6) {
    fail(ErrorCode::InvalidConfig,
         "stair world outside plausible geometry (rise 0.1-0.25, run 0.24-0.4, 4-20 steps, width >= 0.6)");
  }
}

double StairWorld::terrain_height(double x, double y) const {
  double h = 0.0;
  for (const Box& b : StairGeometry::from_world(*this).boxes) {
    if (x >= b.lo[0] && x <= b.hi[0] && y >= b.lo[1] && y <= b.hi[1]) h = std::max(h, b.hi[2]);
  }
  return h;
}

StairGeometry StairGeometry::from_world(const StairWorld& w) {
  w.validate();
  StairGeometry g;
  const double half = 0.5 * w.stair_width;
  for (int i = 0; i + 1 < w.num_steps; ++i) {
    g.boxes.push_back({{i * w.step_run, -half, 0.0}, {(i + 1) * w.step_run, half, (i + 1) * w.step_rise}});
  }
  g.boxes.push_back({{w.top_start(), -half, 0.0}, {w.top_end(), half, w.top_height()}});
  if (w.lateral_walls) {
    const double wall_top = w.top_height() + kWallClearance;
    g.boxes.push_back({{-w.lower_landing, half, 0.0}, {w.top_end(), half + kWallThickness, wall_top}});
    g.boxes.push_back({{-w.lower_landing, -half - kWallThickness, 0.0}, {w.top_end(), -half, wall_top}});
  }
  return g;
}

StairGeometry StairGeometry::flat_floor() { return StairGeometry{}; }

std::optional<double> StairGeometry::cast(const std::array<double, 3>& o, const std::array<double, 3>& d,
                                          double max_range) const {
  double best = std::numeric_limits<double>::infinity();
  if (infinite_floor && d[2] < -kParallelEps && o[2] > 0.0) best = -o[2] / d[2];
  for (const Box& b : boxes) {
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(d[a]) < kParallelEps) {
        if (o[a] < b.lo[a] || o[a] > b.hi[a]) miss = true;
        continue;
      }
      double t0 = (b.lo[a] - o[a]) / d[a];
      double t1 = (b.hi[a] - o[a]) / d[a];
      if (t0 > t1) std::swap(t0, t1);
      t_enter = std::max(t_enter, t0);
      t_exit = std::min(t_exit, t1);
      if (t_enter > t_exit) miss = true;
    }
    if (!miss && t_enter > kHitEps && t_enter < best) best = t_enter;
  }
  if (best <= max_range) return best;
  return std::nullopt;
}

bool StairGeometry::penetrates(const std::array<double, 3>& p) const {
  if (infinite_floor && p[2] <= 0.0) return true;
  return std::any_of(boxes.begin(), boxes.end(), [&](const Box& b) {
    return p[0] >= b.lo[0] && p[0] <= b.hi[0] && p[1] >= b.lo[1] && p[1] <= b.hi[1] && p[2] >= b.lo[2] &&
           p[2] <= b.hi[2];
  });
}

std::array<double, 9> Pose::rotation() const {
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cr = std::cos(roll), sr = std::sin(roll);
  return {cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
          sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
          -sp,     cp * sr,                cp * cr};
}

Pose compose(const Pose& p, const PoseDelta& d) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  Pose out;
  out.x = p.x + c * d.dx - s * d.dy;
  out.y = p.y + s * d.dx + c * d.dy;
  out.z = p.z + d.dz;
  out.yaw = wrap_angle(p.yaw + d.dyaw);
  out.pitch = wrap_angle(p.pitch + d.dpitch);
  out.roll = wrap_angle(p.roll + d.droll);
  return out;
}

std::array<double, 2> to_body(const Pose& p, double wx, double wy) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  const double dx = wx - p.x, dy = wy - p.y;
  return {c * dx + s * dy, -s * dx + c * dy};
}

std::array<double, 2> to_world(const Pose& p, double bx, double by) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  return {p.x + c * bx - s * by, p.y + s * bx + c * by};
}

namespace {

void check_sensor(const SensorConfig& s) {
  if (s.azimuth_bins < 1 || s.elevation_bins < 1 || !positive_finite(s.max_range) ||
      !std::isfinite(s.elevation_min) || !std::isfinite(s.elevation_max) || s.elevation_min > s.elevation_max) {
    fail(ErrorCode::InvalidConfig, "invalid sensor configuration");
  }
}

std::array<double, 3> sensor_direction(const SensorConfig& s, int ray) {
  const int ei = ray / s.azimuth_bins;
  const int ai = ray % s.azimuth_bins;
  const double el = s.elevation_bins == 1
                        ? s.elevation_min
                        : s.elevation_min + ei * (s.elevation_max - s.elevation_min) / (s.elevation_bins - 1);
  const double az = -std::numbers::pi + ai * (2.0 * std::numbers::pi / s.azimuth_bins);
  return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

// Returns the hit in the sensor frame; NaN marks a miss.
std::array<double, 3> trace_ray(const StairGeometry& g, const Pose& pose, const std::array<double, 9>& R,
                                const SensorConfig& s, int ray) {
  const auto ds = sensor_direction(s, ray);
  const std::array<double, 3> dw{R[0] * ds[0] + R[1] * ds[1] + R[2] * ds[2],
                                 R[3] * ds[0] + R[4] * ds[1] + R[5] * ds[2],
                                 R[6] * ds[0] + R[7] * ds[1] + R[8] * ds[2]};
  const auto t = g.cast({pose.x, pose.y, pose.z}, dw, s.max_range);
  if (!t) return {std::nan(""), 0.0, 0.0};
  return {*t * ds[0], *t * ds[1], *t * ds[2]};
}

PointCloud compact(const std::vector<std::array<double, 3>>& rays) {
  PointCloud cloud;
  cloud.points.reserve(rays.size());
  for (const auto& p : rays) {
    if (!std::isnan(p[0])) cloud.points.push_back(p);
  }
  return cloud;
}

}  // namespace

PointCloud render_cloud(const StairGeometry& g, const Pose& pose, const SensorConfig& s) {
  check_sensor(s);
  const auto R = pose.rotation();
  const int n = s.azimuth_bins * s.elevation_bins;
  std::vector<std::array<double, 3>> rays(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) rays[static_cast<std::size_t>(r)] = trace_ray(g, pose, R, s, r);
  return compact(rays);
}

PointCloud render_cloud_serial(const StairGeometry& g, const Pose& pose, const SensorConfig& s) {
  check_sensor(s);
  const auto R = pose.rotation();
  const int n = s.azimuth_bins * s.elevation_bins;
  std::vector<std::array<double, 3>> rays(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) rays[static_cast<std::size_t>(r)] = trace_ray(g, pose, R, s, r);
  return compact(rays);
}

PointCloud render_cloud(const StairWorld& world, const Pose& pose, const SensorConfig& s) {
  return render_cloud(StairGeometry::from_world(world), pose, s);
}

std::array<double, 2> centerline_point(const StairWorld& world, double s) { return {world.start_x() + s, 0.0}; }

std::vector<ExpertFrame> expert_trajectory(const StairWorld& world, const ExpertConfig& cfg) {
  world.validate();
  if (cfg.waypoints < 1 || !positive_finite(cfg.waypoint_spacing) || !positive_finite(cfg.pose_spacing) ||
      !positive_finite(cfg.sensor_height)) {
    fail(ErrorCode::InvalidConfig, "invalid expert configuration");
  }
  const auto geometry = StairGeometry::from_world(world);
  std::vector<ExpertFrame> frames;
  const double length = world.goal_x() - world.start_x();
  for (int i = 0;; ++i) {
    const double s = i * cfg.pose_spacing;
    if (s > length) break;
    const auto c = centerline_point(world, s);
    ExpertFrame f;
    f.pose.x = c[0];
    f.pose.y = c[1];
    f.pose.z = world.terrain_height(c[0], c[1]) + cfg.sensor_height;
    if (geometry.penetrates({f.pose.x, f.pose.y, f.pose.z})) {
      fail(ErrorCode::InvalidPose, "expert pose intersects geometry");
    }
    f.waypoints.reserve(static_cast<std::size_t>(2 * cfg.waypoints));
    for (int k = 1; k <= cfg.waypoints; ++k) {
      const auto w = centerline_point(world, s + k * cfg.waypoint_spacing);
      const auto b = to_body(f.pose, w[0], w[1]);
      f.waypoints.push_back(b[0]);
      f.waypoints.push_back(b[1]);
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

void WorldRanges::validate() const {
  auto ok = [](const std::array<double, 2>& r) { return std::isfinite(r[0]) && r[0] > 0.0 && r[1] >= r[0]; };
  if (!ok(rise) || !ok(run) || !ok(width) || !ok(lower_landing) || !ok(upper_landing) || steps[0] < 1 ||
      steps[1] < steps[0] || lower_landing[0] < 0.3) {
    fail(ErrorCode::InvalidConfig, "invalid world ranges");
  }
}

bool WorldRanges::disjoint(const WorldRanges& a, const WorldRanges& b) {
  auto apart = [](const auto& x, const auto& y) { return x[1] < y[0] || y[1] < x[0]; };
  return apart(a.rise, b.rise) || apart(a.run, b.run) || apart(a.steps, b.steps) || apart(a.width, b.width) ||
         apart(a.lower_landing, b.lower_landing) || apart(a.upper_landing, b.upper_landing);
}

StairWorld sample_world(Rng& rng, const WorldRanges& r) {
  r.validate();
  StairWorld w;
  w.step_rise = uniform(rng, r.rise[0], r.rise[1]);
  w.step_run = uniform(rng, r.run[0], r.run[1]);
  w.num_steps = r.steps[0] + static_cast<int>(std::floor(uniform(rng, 0.0, r.steps[1] - r.steps[0] + 1.0)));
  w.stair_width = uniform(rng, r.width[0], r.width[1]);
  w.lower_landing = uniform(rng, r.lower_landing[0], r.lower_landing[1]);
  w.upper_landing = uniform(rng, r.upper_landing[0], r.upper_landing[1]);
  w.lateral_walls = true;
  return w;
}

}  // namespace ellipse
