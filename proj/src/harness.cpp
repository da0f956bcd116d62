#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>

#include <json.hpp>

#include "ellipse/error.hpp"
#include "ellipse/evidential.hpp"
#include "ellipse/harness.hpp"

namespace ellipse {

namespace {

constexpr int kMaxAugmentAttempts = 32;

Demonstration expert_demo(const StairGeometry& geometry, const ExpertFrame& frame, const SensorConfig& sensor,
                          int world_index) {
  Demonstration d;
  d.pose = frame.pose;
  d.cloud = render_cloud(geometry, frame.pose, sensor);
  quantize_cloud(d.cloud);
  d.waypoints = frame.waypoints;
  d.world_index = world_index;
  return d;
}

// Expert frames of each world plus `variants` perturbed copies per frame.
Dataset build_split(const ExperimentConfig& cfg, const std::string& split, std::vector<StairWorld> worlds,
                    int variants) {
  Dataset data;
  data.header.split = split;
  data.header.grid = cfg.grid;
  data.header.sensor = cfg.sensor;
  data.header.expert = cfg.expert;
  for (std::size_t w = 0; w < worlds.size(); ++w) {
    const auto& world = worlds[w];
    const auto geometry = StairGeometry::from_world(world);
    const auto frames = expert_trajectory(world, cfg.expert);
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const Demonstration original = expert_demo(geometry, frames[f], cfg.sensor, static_cast<int>(w));
      data.demos.push_back(original);
      Rng rng = make_rng(cfg.seed, "augment-" + split, (static_cast<std::uint64_t>(w) << 20) | f);
      for (int v = 0; v < variants; ++v) {
        for (int attempt = 0; attempt < kMaxAugmentAttempts; ++attempt) {
          const PoseDelta delta = sample_perturbation(rng, cfg.perturbation);
          if (delta.is_identity()) continue;
          try {
            Demonstration aug = augment(world, original, delta, cfg.sensor);
            quantize_cloud(aug.cloud);
            data.demos.push_back(std::move(aug));
            break;
          } catch (const Error& e) {
            if (e.code() != ErrorCode::InvalidPose) throw;
          }
        }
      }
    }
  }
  data.header.worlds = std::move(worlds);
  return data;
}

double to_unit(Rng& rng) { return uniform(rng, 0.0, 1.0); }

Matrix rotate_cov(const Matrix& c, double yaw) {
  const double cs = std::cos(yaw), sn = std::sin(yaw);
  const double r[2][2] = {{cs, -sn}, {sn, cs}};
  Matrix out(2, 2);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) acc += r[i][a] * c(a, b) * r[j][b];
      }
      out(i, j) = acc;
    }
  }
  out(0, 1) = out(1, 0) = 0.5 * (out(0, 1) + out(1, 0));
  return out;
}

// Planner covariance from a predictive: the shape of the level-u* set scaled
// by its radius, trace capped (an unbounded set takes the cap).
Matrix planner_cov(const StudentTPredictive& t, double u_star, double max_trace) {
  const auto set = prediction_set(t, u_star);
  Matrix c = set.shape.to_matrix();
  const double tr = c(0, 0) + c(1, 1);
  const double want = set.degenerate || !std::isfinite(set.radius_sq) ? max_trace
                                                                      : std::min(max_trace, tr * set.radius_sq);
  return c * (want / tr);
}

std::vector<WaypointPrediction> model_predictions(const ExperimentConfig& cfg, const Predictor& predictor,
                                                  const StairGeometry& geometry, const StairWorld& world,
                                                  const RobotState& s, SplitPredictions* log) {
  Pose pose{s.x, s.y, world.terrain_height(s.x, s.y) + cfg.expert.sensor_height, s.theta, 0.0, 0.0};
  PointCloud cloud = render_cloud(geometry, pose, cfg.sensor);
  quantize_cloud(cloud);
  const auto features = featurize(cloud, cfg.grid);
  const auto niws = predict(predictor.model->net, predictor.model->head, features);
  std::vector<WaypointPrediction> preds;
  preds.reserve(niws.size());
  for (std::size_t k = 0; k < niws.size(); ++k) {
    const auto t = predictive(niws[k]);
    double u = cfg.sim.planner_level;
    if (predictor.recal) u = recalibrated_level(predictor.recal->for_slot(static_cast<int>(k)), u).u_star;
    const Matrix cov = rotate_cov(planner_cov(t, u, cfg.sim.max_cov_trace), s.theta);
    const auto mean = to_world(pose, t.loc[0], t.loc[1]);
    preds.push_back({{mean[0], mean[1]}, cholesky(cov)});
    if (log) {
      const auto truth = to_body(pose, s.x + static_cast<double>(k + 1) * cfg.expert.waypoint_spacing, 0.0);
      log->predictives.push_back(t);
      log->truths.push_back({truth[0], truth[1]});
      log->slots.push_back(static_cast<int>(k));
    }
  }
  return preds;
}

std::vector<WaypointPrediction> oracle_predictions(const ExperimentConfig& cfg, const RobotState& s) {
  const double var = cfg.sim.oracle_sigma * cfg.sim.oracle_sigma;
  std::vector<WaypointPrediction> preds;
  for (int k = 1; k <= cfg.expert.waypoints; ++k) {
    preds.push_back({{s.x + k * cfg.expert.waypoint_spacing, 0.0}, SpdMatrix::identity(2).scaled(var)});
  }
  return preds;
}

template <class Run>
std::vector<TrialOutcome> collect_trials(const ExperimentConfig& cfg, const Predictor& predictor,
                                         SplitPredictions* predictions, Run&& run_all) {
  const auto n = static_cast<std::size_t>(cfg.trials);
  std::vector<TrialOutcome> outcomes(n);
  std::vector<TrialLog> logs(predictions ? n : 0);
  run_all(n, [&](std::size_t i) {
    outcomes[i] = run_trial(cfg, predictor, static_cast<int>(i), predictions ? &logs[i] : nullptr);
  });
  if (predictions) {
    for (auto& log : logs) {
      auto& p = log.predictions;
      predictions->predictives.insert(predictions->predictives.end(), p.predictives.begin(), p.predictives.end());
      predictions->truths.insert(predictions->truths.end(), p.truths.begin(), p.truths.end());
      predictions->slots.insert(predictions->slots.end(), p.slots.begin(), p.slots.end());
    }
  }
  return outcomes;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- pipeline

GeneratedData generate_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const int n = cfg.data.train_worlds;
  const int n_cal = std::clamp(static_cast<int>(std::lround(cfg.data.calibration_fraction * n)), 1, n - 1);
  std::vector<StairWorld> train_worlds, cal_worlds, eval_worlds;
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(cfg.seed, "train-world", static_cast<std::uint64_t>(i));
    (i < n_cal ? cal_worlds : train_worlds).push_back(sample_world(rng, cfg.train_worlds));
  }
  for (int i = 0; i < cfg.data.eval_worlds; ++i) {
    Rng rng = make_rng(cfg.seed, "eval-world", static_cast<std::uint64_t>(i));
    eval_worlds.push_back(sample_world(rng, cfg.eval_worlds));
  }
  GeneratedData out;
  out.train = build_split(cfg, "train", std::move(train_worlds), cfg.data.augment_variants);
  out.calibration = build_split(cfg, "calibration", std::move(cal_worlds), cfg.data.augment_variants);
  out.eval = build_split(cfg, "eval", std::move(eval_worlds), cfg.data.eval_variants);
  return out;
}

std::vector<Sample> training_samples(const Dataset& train, bool with_augment, int variants) {
  std::vector<Sample> samples;
  const int repeats = with_augment ? variants : 2 * variants;
  for (const auto& d : train.demos) {
    if (d.augmented && !with_augment) continue;
    Sample s{featurize(d.cloud, train.header.grid), d.waypoints};
    const int copies = d.augmented ? 1 : repeats;
    for (int c = 0; c < copies; ++c) samples.push_back(s);
  }
  if (samples.empty()) fail(ErrorCode::EmptyInput, "training split has no demonstrations");
  return samples;
}

TrainedModel train_model(const ExperimentConfig& cfg, const Dataset& train, bool with_augment) {
  if (train.header.grid.feature_size() != cfg.grid.feature_size()) {
    fail(ErrorCode::SchemaMismatch, "training split grid differs from the configured grid");
  }
  const HeadSpec head{cfg.expert.waypoints, 2};
  std::vector<int> dims{cfg.grid.feature_size()};
  dims.insert(dims.end(), cfg.train.hidden.begin(), cfg.train.hidden.end());
  dims.push_back(head.raw_size());
  // Both arms share the initial weights and the shuffling stream.
  Mlp net = Mlp::random(dims, derive_seed(cfg.seed, "model-init"));
  TrainConfig opt = cfg.train.optimizer;
  opt.seed = derive_seed(cfg.seed, "model-train");
  const auto samples = training_samples(train, with_augment, cfg.data.augment_variants);
  auto result = ellipse::train(std::move(net), head, samples, opt);
  return {{std::move(result.net), head}, std::move(result.loss_history)};
}

SplitPredictions predict_split(const Checkpoint& model, const Dataset& data) {
  if (data.demos.empty()) fail(ErrorCode::EmptyInput, "split " + data.header.split + " is empty");
  if (model.net.input_size() != data.header.grid.feature_size()) {
    fail(ErrorCode::SchemaMismatch, "model input size differs from the split's feature grid");
  }
  const int h = model.head.waypoints;
  std::vector<std::vector<StudentTPredictive>> per_demo(data.demos.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < data.demos.size(); ++i) {
    try {
      const auto niws = predict(model.net, model.head, featurize(data.demos[i].cloud, data.header.grid));
      for (const auto& niw : niws) per_demo[i].push_back(predictive(niw));
    } catch (...) {
#pragma omp critical(ellipse_predict_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  SplitPredictions out;
  for (std::size_t i = 0; i < data.demos.size(); ++i) {
    const auto& wp = data.demos[i].waypoints;
    if (static_cast<int>(wp.size()) != 2 * h) fail(ErrorCode::SlotMismatch, "label horizon differs from the model head");
    for (int k = 0; k < h; ++k) {
      out.predictives.push_back(per_demo[i][static_cast<std::size_t>(k)]);
      out.truths.push_back({wp[2 * static_cast<std::size_t>(k)], wp[2 * static_cast<std::size_t>(k) + 1]});
      out.slots.push_back(k);
    }
  }
  return out;
}

Recalibration fit_calibration(const Checkpoint& model, const Dataset& calibration, bool per_slot) {
  const auto split = predict_split(model, calibration);
  std::vector<double> pits;
  pits.reserve(split.predictives.size());
  for (std::size_t i = 0; i < split.predictives.size(); ++i) pits.push_back(pit(split.predictives[i], split.truths[i]));
  return fit_recalibration(pits, split.slots, per_slot, model.head.waypoints);
}

CoverageComparison eval_coverage(const Checkpoint& model, const Recalibration& recal, const Dataset& data) {
  const auto split = predict_split(model, data);
  return {coverage_report(split.predictives, split.truths, split.slots, nullptr, kStandardLevels),
          coverage_report(split.predictives, split.truths, split.slots, &recal, kStandardLevels)};
}

// -------------------------------------------------------------- closed loop

int expert_step_count(const StairWorld& world, const ExperimentConfig& cfg) {
  const double length = world.goal_x() - world.start_x();
  return static_cast<int>(std::ceil(length / (cfg.sim.expert_speed * cfg.mppi.dt) - 1e-9));
}

double corridor_half_width(const StairWorld& world, const ExperimentConfig& cfg) {
  return 0.5 * world.stair_width - cfg.sim.corridor_margin;
}

TrialOutcome run_trial(const ExperimentConfig& cfg, const Predictor& predictor, int trial, TrialLog* log) {
  const auto index = static_cast<std::uint64_t>(trial);
  const bool oracle = cfg.sim.source == WaypointSource::Oracle || predictor.model == nullptr;
  if (!oracle && predictor.model->net.input_size() != cfg.grid.feature_size()) {
    fail(ErrorCode::SchemaMismatch, "model input size differs from the configured feature grid");
  }
  Rng world_rng = make_rng(cfg.seed, "trial-world", index);
  Rng start_rng = make_rng(cfg.seed, "trial-start", index);
  Rng slip_rng = make_rng(cfg.seed, "trial-slip", index);
  Rng plan_rng = make_rng(cfg.seed, "trial-mppi", index);
  Rng corrupt_rng = make_rng(cfg.seed, "trial-corrupt", index);

  TrialOutcome out;
  out.trial = trial;
  out.world = sample_world(world_rng, cfg.eval_worlds);
  const auto geometry = StairGeometry::from_world(out.world);
  out.budget = static_cast<int>(std::floor(cfg.sim.budget_factor * expert_step_count(out.world, cfg) + 1e-9));
  const double half = corridor_half_width(out.world, cfg);
  const Corridor corridor{0.0, half};
  const double goal = out.world.goal_x();

  RobotState s;
  s.x = out.world.start_x();
  s.y = uniform(start_rng, -cfg.sim.start_lateral, cfg.sim.start_lateral);
  s.theta = uniform(start_rng, -cfg.sim.start_yaw, cfg.sim.start_yaw);
  std::vector<Control> nominal(static_cast<std::size_t>(cfg.mppi.horizon));
  WaypointBelief belief;
  double progress = 0.0;
  double sq_sum = 0.0;

  for (int tick = 0; tick < out.budget; ++tick) {
    auto preds = oracle ? oracle_predictions(cfg, s)
                        : model_predictions(cfg, predictor, geometry, out.world, s, log ? &log->predictions : nullptr);
    // Both draws happen every tick so paired arms see the same corruption.
    const bool corrupt = to_unit(corrupt_rng) < cfg.sim.corrupt_fraction;
    const double side = to_unit(corrupt_rng) < 0.5 ? -1.0 : 1.0;
    if (corrupt) {
      const double ox = -std::sin(s.theta) * side * cfg.sim.corrupt_offset;
      const double oy = std::cos(s.theta) * side * cfg.sim.corrupt_offset;
      for (auto& p : preds) {
        p.mean[0] += ox;
        p.mean[1] += oy;
        p.cov = p.cov.scaled(cfg.sim.corrupt_scale);
      }
    }
    if (cfg.fusion) {
      if (!belief.empty()) {
        belief.tick();
        belief.advance(progress);
      }
      belief = fuse(belief, preds, cfg.mppi.gamma);
    } else {
      belief = replace(preds);
    }

    MppiResult plan;
    try {
      plan = mppi_step(s, nominal, belief, corridor, cfg.mppi, plan_rng);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::PlannerDegenerate) throw;
      out.planner_failed = true;
      break;
    }
    const Control actual{plan.applied.v * (1.0 + cfg.sim.slip_v * normal(slip_rng)),
                         plan.applied.omega + cfg.sim.slip_omega * normal(slip_rng)};
    const RobotState next = rollout(s, {actual}, cfg.mppi.dt, cfg.mppi.v_max, cfg.mppi.omega_max).back();
    progress = (next.x - s.x) * std::cos(s.theta) + (next.y - s.y) * std::sin(s.theta);
    if (log) {
      TrajectoryRecord r;
      r.tick = tick;
      r.state = next;
      r.applied = plan.applied;
      for (const auto& slot : belief.slots) {
        r.slot_means.push_back(slot.mean);
        r.slot_traces.push_back(slot.cov.trace());
      }
      r.min_cost = plan.diagnostics.min_cost;
      r.mean_cost = plan.diagnostics.mean_cost;
      log->records.push_back(std::move(r));
    }
    s = next;
    nominal = shift_nominal(plan.nominal);
    ++out.ticks;
    sq_sum += s.y * s.y;
    out.max_lateral = std::max(out.max_lateral, std::abs(s.y));
    if (std::abs(s.y) > half) {
      out.left_corridor = true;
      break;
    }
    if (s.x >= goal) {
      out.reached_goal = true;
      break;
    }
  }
  out.final_x = s.x;
  out.path_cost = out.ticks > 0 ? sq_sum / out.ticks : 0.0;
  out.success = out.reached_goal && !out.left_corridor && !out.planner_failed;
  return out;
}

std::vector<TrialOutcome> run_trials(const ExperimentConfig& cfg, const Predictor& predictor,
                                     SplitPredictions* predictions) {
  return collect_trials(cfg, predictor, predictions, [](std::size_t n, const auto& body) {
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n; ++i) {
      try {
        body(i);
      } catch (...) {
#pragma omp critical(ellipse_trial_error)
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
  });
}

std::vector<TrialOutcome> run_trials_serial(const ExperimentConfig& cfg, const Predictor& predictor,
                                            SplitPredictions* predictions) {
  return collect_trials(cfg, predictor, predictions, [](std::size_t n, const auto& body) {
    for (std::size_t i = 0; i < n; ++i) body(i);
  });
}

// ------------------------------------------------------------------ metrics

RateInterval wilson_interval(int successes, int trials) {
  if (trials <= 0) return {0.0, 0.0, 1.0};
  constexpr double z = 1.959963984540054;
  const double n = trials;
  const double p = successes / n;
  const double denom = 1.0 + z * z / n;
  const double center = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  return {p, std::max(0.0, std::min(p, center - half)), std::min(1.0, std::max(p, center + half))};
}

double mcnemar_exact_p(int only_first, int only_second) {
  const int n = only_first + only_second;
  if (n == 0) return 1.0;
  const int k = std::min(only_first, only_second);
  double tail = 0.0;
  for (int i = 0; i <= k; ++i) {
    tail += std::exp(log_gamma(n + 1.0) - log_gamma(i + 1.0) - log_gamma(n - i + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

PairedReport pair_outcomes(const std::vector<TrialOutcome>& first, const std::vector<TrialOutcome>& second) {
  if (first.size() != second.size()) fail(ErrorCode::DimensionMismatch, "paired arms have different trial counts");
  PairedReport r;
  for (std::size_t i = 0; i < first.size(); ++i) {
    if (first[i].trial != second[i].trial) fail(ErrorCode::DimensionMismatch, "paired arms are not aligned");
    const bool a = first[i].success, b = second[i].success;
    if (a && b) ++r.both;
    if (a && !b) ++r.only_first;
    if (!a && b) ++r.only_second;
    if (!a && !b) ++r.neither;
  }
  r.p_value = mcnemar_exact_p(r.only_first, r.only_second);
  return r;
}

MetricsReport summarize(std::string arm, std::vector<TrialOutcome> outcomes,
                        std::optional<CoverageComparison> coverage) {
  MetricsReport r;
  r.arm = std::move(arm);
  r.trials = static_cast<int>(outcomes.size());
  double cost = 0.0;
  for (const auto& o : outcomes) {
    r.successes += o.success ? 1 : 0;
    cost += o.path_cost;
  }
  r.success = wilson_interval(r.successes, r.trials);
  r.mean_path_cost = outcomes.empty() ? 0.0 : cost / static_cast<double>(outcomes.size());
  if (coverage) r.mean_calibration_error = coverage->with.calibration_error;
  r.coverage = std::move(coverage);
  r.outcomes = std::move(outcomes);
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  using nlohmann::json;
  json outcomes = json::array();
  for (const auto& o : r.outcomes) {
    outcomes.push_back({{"trial", o.trial},
                        {"success", o.success},
                        {"reached_goal", o.reached_goal},
                        {"left_corridor", o.left_corridor},
                        {"planner_failed", o.planner_failed},
                        {"ticks", o.ticks},
                        {"budget", o.budget},
                        {"path_cost", o.path_cost},
                        {"max_lateral", o.max_lateral},
                        {"final_x", o.final_x}});
  }
  json j{{"arm", r.arm},
         {"trials", r.trials},
         {"successes", r.successes},
         {"success_rate", {{"rate", r.success.rate}, {"ci95_lo", r.success.lo}, {"ci95_hi", r.success.hi}}},
         {"mean_path_cost", r.mean_path_cost},
         {"mean_calibration_error", r.mean_calibration_error},
         {"outcomes", outcomes}};
  if (r.coverage) {
    j["coverage"] = {{"levels", r.coverage->without.levels},
                     {"without", r.coverage->without.coverage},
                     {"with", r.coverage->with.coverage},
                     {"calibration_error_without", r.coverage->without.calibration_error},
                     {"calibration_error_with", r.coverage->with.calibration_error}};
  }
  return j.dump(2) + "\n";
}

void write_trials_csv(const std::vector<TrialOutcome>& outcomes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  out << "trial,success,reached_goal,left_corridor,planner_failed,ticks,budget,path_cost,max_lateral,final_x,"
         "step_rise,step_run,num_steps,stair_width\n";
  for (const auto& o : outcomes) {
    out << o.trial << ',' << o.success << ',' << o.reached_goal << ',' << o.left_corridor << ',' << o.planner_failed
        << ',' << o.ticks << ',' << o.budget << ',' << fmt(o.path_cost) << ',' << fmt(o.max_lateral) << ','
        << fmt(o.final_x) << ',' << fmt(o.world.step_rise) << ',' << fmt(o.world.step_run) << ','
        << o.world.num_steps << ',' << fmt(o.world.stair_width) << '\n';
  }
}

void write_coverage_csv(const CoverageComparison& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  out << "level,coverage_without,coverage_with\n";
  for (std::size_t i = 0; i < c.without.levels.size(); ++i) {
    out << fmt(c.without.levels[i]) << ',' << fmt(c.without.coverage[i]) << ',' << fmt(c.with.coverage[i]) << '\n';
  }
  out << "calibration_error," << fmt(c.without.calibration_error) << ',' << fmt(c.with.calibration_error) << '\n';
}

}  // namespace ellipse
