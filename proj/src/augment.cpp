#include "ellipse/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ellipse/error.hpp"

namespace ellipse {

PoseDelta sample_perturbation(Rng& rng, const PerturbationBounds& b) {
  PoseDelta d;
  d.dx = uniform(rng, -b.dx, b.dx);
  d.dy = uniform(rng, -b.dy, b.dy);
  d.dz = uniform(rng, -b.dz, b.dz);
  d.dyaw = uniform(rng, -b.dyaw, b.dyaw);
  d.dpitch = uniform(rng, -b.dpitch, b.dpitch);
  d.droll = uniform(rng, -b.droll, b.droll);
  return d;
}

Demonstration augment(const StairWorld& world, const Demonstration& demo, const PoseDelta& delta,
                      const SensorConfig& sensor) {
  if (demo.waypoints.size() % 2 != 0) fail(ErrorCode::DimensionMismatch, "waypoint labels must be planar pairs");
  if (delta.is_identity()) return demo;
  const auto geometry = StairGeometry::from_world(world);
  Demonstration out;
  out.pose = compose(demo.pose, delta);
  if (geometry.penetrates({out.pose.x, out.pose.y, out.pose.z})) {
    fail(ErrorCode::InvalidPose, "perturbed pose intersects geometry");
  }
  out.cloud = render_cloud(geometry, out.pose, sensor);
  out.waypoints.resize(demo.waypoints.size());
  for (std::size_t k = 0; k < demo.waypoints.size(); k += 2) {
    const auto w = to_world(demo.pose, demo.waypoints[k], demo.waypoints[k + 1]);
    const auto b = to_body(out.pose, w[0], w[1]);
    out.waypoints[k] = b[0];
    out.waypoints[k + 1] = b[1];
  }
  out.augmented = true;
  out.world_index = demo.world_index;
  return out;
}

std::vector<double> featurize(const PointCloud& cloud, const GridConfig& g) {
  if (g.cells_x < 1 || g.cells_y < 1 || !(g.extent_x > 0.0) || !(g.extent_y > 0.0)) {
    fail(ErrorCode::InvalidConfig, "invalid feature grid");
  }
  std::vector<double> f(static_cast<std::size_t>(g.feature_size()), 0.0);
  const double cx = g.extent_x / g.cells_x;
  const double cy = g.extent_y / g.cells_y;
  for (const auto& p : cloud.points) {
    const double ux = p[0] / cx;
    const double uy = (p[1] + 0.5 * g.extent_y) / cy;
    if (!(ux >= 0.0 && ux < g.cells_x && uy >= 0.0 && uy < g.cells_y) || !std::isfinite(p[2])) continue;
    const auto cell = static_cast<std::size_t>(static_cast<int>(ux) * g.cells_y + static_cast<int>(uy));
    double& height = f[2 * cell];
    double& occupied = f[2 * cell + 1];
    height = occupied > 0.0 ? std::max(height, p[2]) : p[2];
    occupied = 1.0;
  }
  return f;
}

void quantize_cloud(PointCloud& cloud) {
  for (auto& p : cloud.points) {
    for (double& v : p) v = std::round(v * 1e4) / 1e4;
  }
}

namespace {

using nlohmann::json;

json world_to_json(const StairWorld& w) {
  return {{"step_rise", w.step_rise},         {"step_run", w.step_run},
          {"num_steps", w.num_steps},         {"stair_width", w.stair_width},
          {"lower_landing", w.lower_landing}, {"upper_landing", w.upper_landing},
          {"lateral_walls", w.lateral_walls}};
}

StairWorld world_from_json(const json& j) {
  StairWorld w;
  w.step_rise = j.at("step_rise").get<double>();
  w.step_run = j.at("step_run").get<double>();
  w.num_steps = j.at("num_steps").get<int>();
  w.stair_width = j.at("stair_width").get<double>();
  w.lower_landing = j.at("lower_landing").get<double>();
  w.upper_landing = j.at("upper_landing").get<double>();
  w.lateral_walls = j.at("lateral_walls").get<bool>();
  return w;
}

json pose_to_json(const Pose& p) { return json::array({p.x, p.y, p.z, p.yaw, p.pitch, p.roll}); }

Pose pose_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 6) fail(ErrorCode::SchemaMismatch, "pose must have 6 entries");
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  const auto& h = data.header;
  json worlds = json::array();
  for (const auto& w : h.worlds) worlds.push_back(world_to_json(w));
  const json header{
      {"record", "header"},
      {"schema_version", kDatasetSchemaVersion},
      {"split", h.split},
      {"grid", {{"cells_x", h.grid.cells_x}, {"cells_y", h.grid.cells_y}, {"extent_x", h.grid.extent_x},
                {"extent_y", h.grid.extent_y}}},
      {"sensor", {{"azimuth_bins", h.sensor.azimuth_bins}, {"elevation_bins", h.sensor.elevation_bins},
                  {"max_range", h.sensor.max_range}, {"elevation_min", h.sensor.elevation_min},
                  {"elevation_max", h.sensor.elevation_max}}},
      {"expert", {{"waypoints", h.expert.waypoints}, {"waypoint_spacing", h.expert.waypoint_spacing},
                  {"pose_spacing", h.expert.pose_spacing}, {"sensor_height", h.expert.sensor_height}}},
      {"worlds", worlds},
      {"count", data.demos.size()}};
  out << header.dump() << '\n';
  for (const auto& d : data.demos) {
    PointCloud cloud = d.cloud;
    quantize_cloud(cloud);
    std::vector<double> flat;
    flat.reserve(3 * cloud.points.size());
    for (const auto& p : cloud.points) flat.insert(flat.end(), p.begin(), p.end());
    const json rec{{"record", "demo"},    {"world", d.world_index}, {"augmented", d.augmented},
                   {"pose", pose_to_json(d.pose)}, {"waypoints", d.waypoints}, {"cloud", flat}};
    out << rec.dump() << '\n';
  }
  if (!out) fail(ErrorCode::MissingArtifact, "failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingArtifact, "missing dataset " + path.string());
  Dataset data;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::SchemaMismatch, "empty dataset " + path.string());
  try {
    const json h = json::parse(line);
    if (h.at("record") != "header") fail(ErrorCode::SchemaMismatch, "dataset must start with a header record");
    if (h.at("schema_version").get<int>() != kDatasetSchemaVersion) {
      fail(ErrorCode::SchemaMismatch, "unsupported dataset schema version");
    }
    auto& hd = data.header;
    hd.split = h.at("split").get<std::string>();
    const auto& g = h.at("grid");
    hd.grid = {g.at("cells_x").get<int>(), g.at("cells_y").get<int>(), g.at("extent_x").get<double>(),
               g.at("extent_y").get<double>()};
    const auto& s = h.at("sensor");
    hd.sensor = {s.at("azimuth_bins").get<int>(), s.at("elevation_bins").get<int>(), s.at("max_range").get<double>(),
                 s.at("elevation_min").get<double>(), s.at("elevation_max").get<double>()};
    const auto& e = h.at("expert");
    hd.expert = {e.at("waypoints").get<int>(), e.at("waypoint_spacing").get<double>(),
                 e.at("pose_spacing").get<double>(), e.at("sensor_height").get<double>()};
    for (const auto& w : h.at("worlds")) hd.worlds.push_back(world_from_json(w));
    const auto count = h.at("count").get<std::size_t>();
    data.demos.reserve(count);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json r = json::parse(line);
      if (r.at("record") != "demo") fail(ErrorCode::SchemaMismatch, "unexpected record type");
      Demonstration d;
      d.world_index = r.at("world").get<int>();
      d.augmented = r.at("augmented").get<bool>();
      d.pose = pose_from_json(r.at("pose"));
      d.waypoints = r.at("waypoints").get<std::vector<double>>();
      if (d.waypoints.size() != static_cast<std::size_t>(2 * hd.expert.waypoints)) {
        fail(ErrorCode::SchemaMismatch, "waypoint label length does not match the header");
      }
      const auto flat = r.at("cloud").get<std::vector<double>>();
      if (flat.size() % 3 != 0) fail(ErrorCode::SchemaMismatch, "cloud must hold xyz triples");
      d.cloud.points.reserve(flat.size() / 3);
      for (std::size_t i = 0; i < flat.size(); i += 3) d.cloud.points.push_back({flat[i], flat[i + 1], flat[i + 2]});
      data.demos.push_back(std::move(d));
    }
    if (data.demos.size() != count) fail(ErrorCode::SchemaMismatch, "dataset record count mismatch");
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::SchemaMismatch, std::string("malformed dataset: ") + ex.what());
  }
  return data;
}

}  // namespace ellipse
