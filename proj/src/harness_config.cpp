#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ellipse/error.hpp"
#include "ellipse/harness.hpp"

namespace ellipse {

namespace {

using nlohmann::json;

// Reads known keys into defaults and rejects keys it never asked about.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorCode::SchemaMismatch, where_ + " must be a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::SchemaMismatch, where_ + "." + key + " has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      bool known = false;
      for (const auto& k : seen_) known = known || k == item.key();
      if (!known) fail(ErrorCode::SchemaMismatch, "unknown key " + where_ + "." + item.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

json ranges_to_json(const WorldRanges& r) {
  return {{"rise", r.rise},   {"run", r.run},
          {"steps", r.steps}, {"width", r.width},
          {"lower_landing", r.lower_landing}, {"upper_landing", r.upper_landing}};
}

void ranges_from_json(const json& j, const std::string& where, WorldRanges& r) {
  ObjectReader in(j, where);
  in.read("rise", r.rise);
  in.read("run", r.run);
  in.read("steps", r.steps);
  in.read("width", r.width);
  in.read("lower_landing", r.lower_landing);
  in.read("upper_landing", r.upper_landing);
  in.finish();
}

const char* source_name(WaypointSource s) { return s == WaypointSource::Oracle ? "oracle" : "model"; }

}  // namespace

WorldRanges ExperimentConfig::default_eval_ranges() {
  WorldRanges r;
  r.rise = {0.19, 0.24};
  return r;
}

MppiConfig ExperimentConfig::default_eval_mppi() {
  MppiConfig m;
  m.weights.corridor = 0.0;
  return m;
}

void ExperimentConfig::validate() const {
  train_worlds.validate();
  eval_worlds.validate();
  if (!WorldRanges::disjoint(train_worlds, eval_worlds)) {
    fail(ErrorCode::InvalidConfig, "train and eval world ranges must be disjoint in at least one parameter");
  }
  auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorCode::InvalidConfig, what);
  };
  const auto& d = data;
  require(d.train_worlds >= 2, "data.train_worlds must be >= 2");
  require(d.calibration_fraction > 0.0 && d.calibration_fraction < 1.0, "data.calibration_fraction must be in (0, 1)");
  require(d.eval_worlds >= 1, "data.eval_worlds must be >= 1");
  require(d.augment_variants >= 1, "data.augment_variants must be >= 1");
  require(d.eval_variants >= 0, "data.eval_variants must be >= 0");
  require(sensor.azimuth_bins >= 1 && sensor.elevation_bins >= 1 && sensor.max_range > 0.0 &&
              sensor.elevation_max >= sensor.elevation_min,
          "invalid sensor");
  require(grid.cells_x >= 1 && grid.cells_y >= 1 && grid.extent_x > 0.0 && grid.extent_y > 0.0, "invalid grid");
  require(expert.waypoints >= 1 && expert.waypoint_spacing > 0.0 && expert.pose_spacing > 0.0 &&
              expert.sensor_height > 0.0,
          "invalid expert");
  const auto& p = perturbation;
  require(p.dx >= 0.0 && p.dy >= 0.0 && p.dz >= 0.0 && p.dyaw >= 0.0 && p.dpitch >= 0.0 && p.droll >= 0.0,
          "perturbation bounds must be non-negative");
  require(trials >= 0, "trials must be >= 0");
  for (int h : train.hidden) require(h >= 1, "train.hidden sizes must be >= 1");
  require(train.optimizer.epochs >= 0 && train.optimizer.batch_size >= 1 && train.optimizer.learning_rate > 0.0,
          "invalid optimizer");
  mppi.validate();
  const auto& s = sim;
  require(s.start_lateral >= 0.0 && s.start_yaw >= 0.0 && s.slip_v >= 0.0 && s.slip_omega >= 0.0,
          "sim noise bounds must be non-negative");
  require(s.corridor_margin >= 0.0 && s.corridor_margin < 0.5 * std::min(train_worlds.width[0], eval_worlds.width[0]),
          "sim.corridor_margin must leave a positive corridor");
  require(s.expert_speed > 0.0 && s.budget_factor >= 0.0, "invalid step budget");
  require(s.planner_level > 0.0 && s.planner_level < 1.0, "sim.planner_level must be in (0, 1)");
  require(s.max_cov_trace > 0.0 && s.oracle_sigma > 0.0, "invalid planner covariance settings");
  require(s.corrupt_fraction >= 0.0 && s.corrupt_fraction <= 1.0 && s.corrupt_scale > 0.0,
          "invalid corruption settings");
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& o = c.train.optimizer;
  const auto& m = c.mppi;
  const auto& s = c.sim;
  const auto& p = c.perturbation;
  const json j{
      {"seed", c.seed},
      {"train_worlds", ranges_to_json(c.train_worlds)},
      {"eval_worlds", ranges_to_json(c.eval_worlds)},
      {"data",
       {{"train_worlds", c.data.train_worlds},
        {"calibration_fraction", c.data.calibration_fraction},
        {"eval_worlds", c.data.eval_worlds},
        {"augment_variants", c.data.augment_variants},
        {"eval_variants", c.data.eval_variants}}},
      {"sensor",
       {{"azimuth_bins", c.sensor.azimuth_bins},
        {"elevation_bins", c.sensor.elevation_bins},
        {"max_range", c.sensor.max_range},
        {"elevation_min", c.sensor.elevation_min},
        {"elevation_max", c.sensor.elevation_max}}},
      {"grid",
       {{"cells_x", c.grid.cells_x},
        {"cells_y", c.grid.cells_y},
        {"extent_x", c.grid.extent_x},
        {"extent_y", c.grid.extent_y}}},
      {"expert",
       {{"waypoints", c.expert.waypoints},
        {"waypoint_spacing", c.expert.waypoint_spacing},
        {"pose_spacing", c.expert.pose_spacing},
        {"sensor_height", c.expert.sensor_height}}},
      {"perturbation",
       {{"dx", p.dx}, {"dy", p.dy}, {"dz", p.dz}, {"dyaw", p.dyaw}, {"dpitch", p.dpitch}, {"droll", p.droll}}},
      {"augment", c.augment},
      {"recalibrate", c.recalibrate},
      {"per_slot_maps", c.per_slot_maps},
      {"fusion", c.fusion},
      {"paired_augment", c.paired_augment},
      {"trials", c.trials},
      {"train",
       {{"hidden", c.train.hidden},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"learning_rate", o.learning_rate},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"epsilon", o.epsilon},
        {"lambda_reg", o.lambda_reg}}},
      {"mppi",
       {{"rollouts", m.rollouts},
        {"horizon", m.horizon},
        {"dt", m.dt},
        {"lambda", m.lambda},
        {"noise_v", m.noise_v},
        {"noise_omega", m.noise_omega},
        {"v_max", m.v_max},
        {"omega_max", m.omega_max},
        {"gamma", m.gamma},
        {"confidence_floor", m.confidence_floor},
        {"weights",
         {{"tracking", m.weights.tracking},
          {"effort", m.weights.effort},
          {"corridor", m.weights.corridor},
          {"mahalanobis", m.weights.mahalanobis}}}}},
      {"sim",
       {{"source", source_name(s.source)},
        {"start_lateral", s.start_lateral},
        {"start_yaw", s.start_yaw},
        {"slip_v", s.slip_v},
        {"slip_omega", s.slip_omega},
        {"corridor_margin", s.corridor_margin},
        {"expert_speed", s.expert_speed},
        {"budget_factor", s.budget_factor},
        {"planner_level", s.planner_level},
        {"max_cov_trace", s.max_cov_trace},
        {"oracle_sigma", s.oracle_sigma},
        {"corrupt_fraction", s.corrupt_fraction},
        {"corrupt_offset", s.corrupt_offset},
        {"corrupt_scale", s.corrupt_scale}}},
  };
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaMismatch, std::string("config is not valid JSON: ") + e.what());
  }
  if (doc.is_object() && doc.contains("manifest_version")) {
    if (doc["manifest_version"] != kManifestVersion || !doc.contains("config")) {
      fail(ErrorCode::SchemaMismatch, "unsupported run manifest");
    }
    doc = doc["config"];
  }

  ExperimentConfig c;
  ObjectReader in(doc, "config");
  in.read("seed", c.seed);
  if (const auto* j = in.child("train_worlds")) ranges_from_json(*j, in.path("train_worlds"), c.train_worlds);
  if (const auto* j = in.child("eval_worlds")) ranges_from_json(*j, in.path("eval_worlds"), c.eval_worlds);
  if (const auto* j = in.child("data")) {
    ObjectReader r(*j, in.path("data"));
    r.read("train_worlds", c.data.train_worlds);
    r.read("calibration_fraction", c.data.calibration_fraction);
    r.read("eval_worlds", c.data.eval_worlds);
    r.read("augment_variants", c.data.augment_variants);
    r.read("eval_variants", c.data.eval_variants);
    r.finish();
  }
  if (const auto* j = in.child("sensor")) {
    ObjectReader r(*j, in.path("sensor"));
    r.read("azimuth_bins", c.sensor.azimuth_bins);
    r.read("elevation_bins", c.sensor.elevation_bins);
    r.read("max_range", c.sensor.max_range);
    r.read("elevation_min", c.sensor.elevation_min);
    r.read("elevation_max", c.sensor.elevation_max);
    r.finish();
  }
  if (const auto* j = in.child("grid")) {
    ObjectReader r(*j, in.path("grid"));
    r.read("cells_x", c.grid.cells_x);
    r.read("cells_y", c.grid.cells_y);
    r.read("extent_x", c.grid.extent_x);
    r.read("extent_y", c.grid.extent_y);
    r.finish();
  }
  if (const auto* j = in.child("expert")) {
    ObjectReader r(*j, in.path("expert"));
    r.read("waypoints", c.expert.waypoints);
    r.read("waypoint_spacing", c.expert.waypoint_spacing);
    r.read("pose_spacing", c.expert.pose_spacing);
    r.read("sensor_height", c.expert.sensor_height);
    r.finish();
  }
  if (const auto* j = in.child("perturbation")) {
    auto& p = c.perturbation;
    ObjectReader r(*j, in.path("perturbation"));
    r.read("dx", p.dx);
    r.read("dy", p.dy);
    r.read("dz", p.dz);
    r.read("dyaw", p.dyaw);
    r.read("dpitch", p.dpitch);
    r.read("droll", p.droll);
    r.finish();
  }
  in.read("augment", c.augment);
  in.read("recalibrate", c.recalibrate);
  in.read("per_slot_maps", c.per_slot_maps);
  in.read("fusion", c.fusion);
  in.read("paired_augment", c.paired_augment);
  in.read("trials", c.trials);
  if (const auto* j = in.child("train")) {
    auto& o = c.train.optimizer;
    ObjectReader r(*j, in.path("train"));
    r.read("hidden", c.train.hidden);
    r.read("epochs", o.epochs);
    r.read("batch_size", o.batch_size);
    r.read("learning_rate", o.learning_rate);
    r.read("beta1", o.beta1);
    r.read("beta2", o.beta2);
    r.read("epsilon", o.epsilon);
    r.read("lambda_reg", o.lambda_reg);
    r.finish();
  }
  if (const auto* j = in.child("mppi")) {
    auto& m = c.mppi;
    ObjectReader r(*j, in.path("mppi"));
    r.read("rollouts", m.rollouts);
    r.read("horizon", m.horizon);
    r.read("dt", m.dt);
    r.read("lambda", m.lambda);
    r.read("noise_v", m.noise_v);
    r.read("noise_omega", m.noise_omega);
    r.read("v_max", m.v_max);
    r.read("omega_max", m.omega_max);
    r.read("gamma", m.gamma);
    r.read("confidence_floor", m.confidence_floor);
    if (const auto* w = r.child("weights")) {
      ObjectReader rw(*w, r.path("weights"));
      rw.read("tracking", m.weights.tracking);
      rw.read("effort", m.weights.effort);
      rw.read("corridor", m.weights.corridor);
      rw.read("mahalanobis", m.weights.mahalanobis);
      rw.finish();
    }
    r.finish();
  }
  if (const auto* j = in.child("sim")) {
    auto& s = c.sim;
    ObjectReader r(*j, in.path("sim"));
    std::string source = source_name(s.source);
    r.read("source", source);
    if (source == "model") {
      s.source = WaypointSource::Model;
    } else if (source == "oracle") {
      s.source = WaypointSource::Oracle;
    } else {
      fail(ErrorCode::InvalidConfig, "sim.source must be \"model\" or \"oracle\"");
    }
    r.read("start_lateral", s.start_lateral);
    r.read("start_yaw", s.start_yaw);
    r.read("slip_v", s.slip_v);
    r.read("slip_omega", s.slip_omega);
    r.read("corridor_margin", s.corridor_margin);
    r.read("expert_speed", s.expert_speed);
    r.read("budget_factor", s.budget_factor);
    r.read("planner_level", s.planner_level);
    r.read("max_cov_trace", s.max_cov_trace);
    r.read("oracle_sigma", s.oracle_sigma);
    r.read("corrupt_fraction", s.corrupt_fraction);
    r.read("corrupt_offset", s.corrupt_offset);
    r.read("corrupt_scale", s.corrupt_scale);
    r.finish();
  }
  in.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingArtifact, "missing config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace ellipse
