#pragma once

// Experiment orchestration: dataset generation, training, calibration,
// coverage and closed-loop success evaluation, each step reproducible from a
// run manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ellipse/augment.hpp"
#include "ellipse/calibrate.hpp"
#include "ellipse/error.hpp"
#include "ellipse/net.hpp"
#include "ellipse/planner.hpp"

namespace ellipse {

inline constexpr std::string_view kToolVersion = "1.0.0";
inline constexpr int kManifestVersion = 1;

struct DataSettings {
  int train_worlds = 40;
  /// Fraction of train-range worlds held out for calibration.
  double calibration_fraction = 0.2;
  int eval_worlds = 10;
  /// Augmented variants per expert frame (train and calibration splits).
  int augment_variants = 4;
  /// Off-trajectory variants per expert frame in the evaluation split.
  int eval_variants = 2;
};

struct TrainSettings {
  std::vector<int> hidden{64, 64};
  TrainConfig optimizer;
};

enum class WaypointSource { Model, Oracle };

struct SimSettings {
  WaypointSource source = WaypointSource::Model;
  /// Start pose: y ~ U(±start_lateral), heading ~ U(±start_yaw).
  double start_lateral = 0.15;
  double start_yaw = 0.25;
  /// Actuation noise: v·(1 + slip_v·n), ω + slip_omega·n.
  double slip_v = 0.05;
  double slip_omega = 0.1;
  /// Success corridor half-width is stair_width/2 − corridor_margin.
  double corridor_margin = 0.15;
  /// Expert walking speed defining the expert step count.
  double expert_speed = 0.5;
  /// Step budget = budget_factor × expert step count.
  double budget_factor = 3.0;
  /// Nominal mass of the prediction set handed to the planner.
  double planner_level = 0.9;
  /// Cap on the planner covariance trace (degenerate sets included).
  double max_cov_trace = 4.0;
  double oracle_sigma = 0.05;
  /// Fraction of ticks whose predictions are replaced by a corrupted copy.
  double corrupt_fraction = 0.0;
  double corrupt_offset = 0.6;
  double corrupt_scale = 25.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  WorldRanges train_worlds;
  WorldRanges eval_worlds = default_eval_ranges();
  DataSettings data;
  SensorConfig sensor;
  GridConfig grid;
  ExpertConfig expert;
  PerturbationBounds perturbation;
  bool augment = true;
  bool recalibrate = true;
  bool per_slot_maps = false;
  bool fusion = true;
  /// eval-success evaluates both augmentation arms on paired seeds.
  bool paired_augment = true;
  int trials = 100;
  TrainSettings train;
  MppiConfig mppi = default_eval_mppi();
  SimSettings sim;

  /// Throws InvalidConfig, including when train and eval ranges overlap in
  /// every parameter.
  void validate() const;

  static WorldRanges default_eval_ranges();
  /// Planner defaults for evaluation: no corridor term, so the robot only
  /// sees the predicted waypoints.
  static MppiConfig default_eval_mppi();
};

std::string config_to_json(const ExperimentConfig& config);
/// Accepts a config document or a run manifest (its embedded config).
/// Unknown keys are SchemaMismatch; bad values are InvalidConfig.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------- pipeline

struct GeneratedData {
  Dataset train;
  Dataset calibration;
  Dataset eval;
};

GeneratedData generate_data(const ExperimentConfig& config);

/// Epoch composition: with augmentation each expert frame appears
/// augment_variants times next to its augmented copies; without, each expert
/// frame appears 2·augment_variants times, so both arms see equal epochs.
std::vector<Sample> training_samples(const Dataset& train, bool augment, int augment_variants);

struct TrainedModel {
  Checkpoint checkpoint;
  std::vector<double> loss_history;
};

TrainedModel train_model(const ExperimentConfig& config, const Dataset& train, bool augment);

struct SplitPredictions {
  std::vector<StudentTPredictive> predictives;
  std::vector<Vector> truths;
  std::vector<int> slots;
};

SplitPredictions predict_split(const Checkpoint& model, const Dataset& data);

Recalibration fit_calibration(const Checkpoint& model, const Dataset& calibration, bool per_slot);

struct CoverageComparison {
  CoverageReport without;
  CoverageReport with;
};

CoverageComparison eval_coverage(const Checkpoint& model, const Recalibration& recal, const Dataset& data);

// -------------------------------------------------------------- closed loop

/// A null model selects the ground-truth centreline source.
struct Predictor {
  const Checkpoint* model = nullptr;
  const Recalibration* recal = nullptr;
};

struct TrialOutcome {
  int trial = 0;
  StairWorld world;
  bool success = false;
  bool reached_goal = false;
  bool left_corridor = false;
  bool planner_failed = false;
  int ticks = 0;
  int budget = 0;
  /// Mean squared lateral deviation from the centreline over executed ticks.
  double path_cost = 0.0;
  double max_lateral = 0.0;
  double final_x = 0.0;
};

int expert_step_count(const StairWorld& world, const ExperimentConfig& config);
double corridor_half_width(const StairWorld& world, const ExperimentConfig& config);

struct TrialLog {
  std::vector<TrajectoryRecord> records;
  /// Per tick and slot: model predictive in the body frame and the
  /// ground-truth centreline point it should cover.
  SplitPredictions predictions;
};

TrialOutcome run_trial(const ExperimentConfig& config, const Predictor& predictor, int trial,
                       TrialLog* log = nullptr);

/// Trials in parallel; each trial draws from its own derived streams.
std::vector<TrialOutcome> run_trials(const ExperimentConfig& config, const Predictor& predictor,
                                     SplitPredictions* predictions = nullptr);
/// Single-threaded reference for run_trials.
std::vector<TrialOutcome> run_trials_serial(const ExperimentConfig& config, const Predictor& predictor,
                                            SplitPredictions* predictions = nullptr);

// ------------------------------------------------------------------ metrics

struct RateInterval {
  double rate = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval at 95%.
RateInterval wilson_interval(int successes, int trials);

struct MetricsReport {
  std::string arm;
  int trials = 0;
  int successes = 0;
  RateInterval success;
  std::optional<CoverageComparison> coverage;
  /// Mean |coverage − level| over the standard levels (with recalibration).
  double mean_calibration_error = 0.0;
  double mean_path_cost = 0.0;
  std::vector<TrialOutcome> outcomes;
};

MetricsReport summarize(std::string arm, std::vector<TrialOutcome> outcomes,
                        std::optional<CoverageComparison> coverage);

struct PairedReport {
  int both = 0;
  int only_first = 0;
  int only_second = 0;
  int neither = 0;
  /// Exact two-sided McNemar p-value on the discordant pairs.
  double p_value = 1.0;
};

PairedReport pair_outcomes(const std::vector<TrialOutcome>& first, const std::vector<TrialOutcome>& second);
double mcnemar_exact_p(int only_first, int only_second);

std::string metrics_to_json(const MetricsReport& report);
void write_trials_csv(const std::vector<TrialOutcome>& outcomes, const std::filesystem::path& path);
void write_coverage_csv(const CoverageComparison& coverage, const std::filesystem::path& path);

// ---------------------------------------------------------------------- CLI

struct RunRequest {
  std::string subcommand;
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = ".";
  std::optional<int> trials;
  /// (augment | recal | fusion, on?)
  std::vector<std::pair<std::string, bool>> ablations;
};

inline const std::vector<std::string> kSubcommands{"gen-data",      "train",        "calibrate",
                                                   "eval-coverage", "eval-success", "plan-demo"};

/// Parses "name=on|off".
std::pair<std::string, bool> parse_ablation(std::string_view text);

/// Config file (or defaults) with the flag overrides applied.
ExperimentConfig resolve_config(const RunRequest& request);

/// Runs one subcommand in `request.out`, writing its artifacts and the run
/// manifest. Returns the manifest path.
std::filesystem::path run_subcommand(const RunRequest& request);

/// Process exit status for an error: 2 missing artifact, 3 schema mismatch,
/// 4 non-finite loss, 5 invalid config, 1 otherwise.
int exit_code(ErrorCode code);

/// Hex FNV-1a digest of a file's bytes; MissingArtifact if absent.
std::string file_digest(const std::filesystem::path& path);

std::string arm_tag(bool augment);
std::string eval_tag(const ExperimentConfig& config);

}  // namespace ellipse
