#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ellipse/error.hpp"
#include "ellipse/harness.hpp"

namespace ellipse {

namespace fs = std::filesystem;

namespace {

using nlohmann::json;

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string on_off(bool b) { return b ? "on" : "off"; }

// Relative artifact names inside the output directory.
namespace file {
const std::string train = "train.jsonl";
const std::string calibration = "calib.jsonl";
const std::string eval = "eval.jsonl";
std::string model(bool aug) { return "model_" + arm_tag(aug) + ".json"; }
std::string loss(bool aug) { return "train_loss_" + arm_tag(aug) + ".csv"; }
std::string recal(bool aug) { return "calibration_" + arm_tag(aug) + ".json"; }
}  // namespace file

class Run {
 public:
  Run(std::string subcommand, ExperimentConfig cfg, fs::path dir)
      : subcommand_(std::move(subcommand)), cfg_(std::move(cfg)), dir_(std::move(dir)) {}

  const ExperimentConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  // Registers an upstream artifact; MissingArtifact if it does not exist.
  fs::path input(const std::string& name) {
    inputs_[name] = file_digest(path(name));
    return path(name);
  }
  fs::path output(const std::string& name) {
    outputs_.push_back(name);
    return path(name);
  }
  void write_text(const std::string& name, const std::string& text) {
    std::ofstream out(output(name), std::ios::binary);
    if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path(name).string());
    out << text;
  }

  fs::path finish(const std::string& tag) {
    const std::string config_text = config_to_json(cfg_);
    json outputs = json::object();
    for (const auto& name : outputs_) outputs[name] = file_digest(path(name));
    const json manifest{{"manifest_version", kManifestVersion},
                        {"tool", "ellipse"},
                        {"version", std::string(kToolVersion)},
                        {"dataset_schema_version", kDatasetSchemaVersion},
                        {"checkpoint_version", kCheckpointVersion},
                        {"subcommand", subcommand_},
                        {"seed", cfg_.seed},
                        {"config_hash", hex64(fnv1a(config_text))},
                        {"worlds_disjoint", WorldRanges::disjoint(cfg_.train_worlds, cfg_.eval_worlds)},
                        {"config", json::parse(config_text)},
                        {"inputs", inputs_},
                        {"outputs", outputs}};
    const fs::path p = path("manifest_" + subcommand_ + (tag.empty() ? "" : "_" + tag) + ".json");
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + p.string());
    out << manifest.dump(2) << '\n';
    return p;
  }

 private:
  std::string subcommand_;
  ExperimentConfig cfg_;
  fs::path dir_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

Dataset read_split(Run& run, const std::string& name) {
  Dataset d = read_dataset(run.input(name));
  const auto& g = d.header.grid;
  const auto& c = run.cfg().grid;
  if (g.cells_x != c.cells_x || g.cells_y != c.cells_y || g.extent_x != c.extent_x || g.extent_y != c.extent_y) {
    fail(ErrorCode::SchemaMismatch, name + " was generated with a different feature grid");
  }
  return d;
}

Checkpoint read_model(Run& run, bool aug) {
  Checkpoint m = load_checkpoint(run.input(file::model(aug)));
  if (m.net.input_size() != run.cfg().grid.feature_size() || m.head.waypoints != run.cfg().expert.waypoints) {
    fail(ErrorCode::SchemaMismatch, file::model(aug) + " does not match the configured grid or horizon");
  }
  return m;
}

Recalibration read_recal(Run& run, bool aug) { return load_calibration(run.input(file::recal(aug))).recal; }

fs::path gen_data(Run& run) {
  const auto data = generate_data(run.cfg());
  write_dataset(data.train, run.output(file::train));
  write_dataset(data.calibration, run.output(file::calibration));
  write_dataset(data.eval, run.output(file::eval));
  return run.finish("");
}

fs::path train_cmd(Run& run) {
  const bool aug = run.cfg().augment;
  const Dataset data = read_split(run, file::train);
  const auto model = train_model(run.cfg(), data, aug);
  save_checkpoint(model.checkpoint, run.output(file::model(aug)));
  std::ostringstream log;
  log << "epoch,loss\n";
  for (std::size_t e = 0; e < model.loss_history.size(); ++e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", model.loss_history[e]);
    log << e << ',' << buf << '\n';
  }
  run.write_text(file::loss(aug), log.str());
  return run.finish(arm_tag(aug));
}

fs::path calibrate_cmd(Run& run) {
  const bool aug = run.cfg().augment;
  const Checkpoint model = read_model(run, aug);
  const Dataset data = read_split(run, file::calibration);
  CalibrationArtifact artifact;
  artifact.recal = fit_calibration(model, data, run.cfg().per_slot_maps);
  artifact.split_hash = file_digest(run.path(file::calibration));
  artifact.n = data.demos.size() * static_cast<std::size_t>(model.head.waypoints);
  save_calibration(artifact, run.output(file::recal(aug)));
  return run.finish(arm_tag(aug));
}

fs::path eval_coverage_cmd(Run& run) {
  const bool aug = run.cfg().augment;
  const Checkpoint model = read_model(run, aug);
  const Recalibration recal = run.cfg().recalibrate ? read_recal(run, aug) : Recalibration::identity();
  const Dataset data = read_split(run, file::eval);
  const auto tag = arm_tag(aug) + "_recal_" + on_off(run.cfg().recalibrate);
  const auto coverage = eval_coverage(model, recal, data);
  write_coverage_csv(coverage, run.output("coverage_" + tag + ".csv"));
  run.write_text("coverage_" + tag + ".json", metrics_to_json(summarize(tag, {}, coverage)));
  return run.finish(tag);
}

MetricsReport eval_arm(Run& run, const ExperimentConfig& cfg, bool aug) {
  std::optional<Checkpoint> model;
  std::optional<Recalibration> recal;
  Predictor predictor;
  if (cfg.sim.source == WaypointSource::Model) {
    model = read_model(run, aug);
    predictor.model = &*model;
    if (cfg.recalibrate) {
      recal = read_recal(run, aug);
      predictor.recal = &*recal;
    }
  }
  SplitPredictions predictions;
  auto outcomes = run_trials(cfg, predictor, model ? &predictions : nullptr);
  std::optional<CoverageComparison> coverage;
  if (!predictions.predictives.empty()) {
    const Recalibration applied = recal ? *recal : Recalibration::identity();
    coverage = CoverageComparison{
        coverage_report(predictions.predictives, predictions.truths, predictions.slots, nullptr, kStandardLevels),
        coverage_report(predictions.predictives, predictions.truths, predictions.slots, &applied, kStandardLevels)};
  }
  ExperimentConfig arm_cfg = cfg;
  arm_cfg.augment = aug;
  arm_cfg.paired_augment = false;
  const auto tag = eval_tag(arm_cfg);
  auto report = summarize(tag, std::move(outcomes), std::move(coverage));
  write_trials_csv(report.outcomes, run.output("trials_" + tag + ".csv"));
  run.write_text("metrics_" + tag + ".json", metrics_to_json(report));
  return report;
}

fs::path eval_success_cmd(Run& run) {
  const auto& cfg = run.cfg();
  const bool paired = cfg.paired_augment && cfg.sim.source == WaypointSource::Model;
  if (!paired) {
    eval_arm(run, cfg, cfg.augment);
    return run.finish(eval_tag(cfg));
  }
  // Fail on missing artifacts of either arm before spending time on trials.
  for (bool aug : {true, false}) {
    file_digest(run.path(file::model(aug)));
    if (cfg.recalibrate) file_digest(run.path(file::recal(aug)));
  }
  const auto on = eval_arm(run, cfg, true);
  const auto off = eval_arm(run, cfg, false);
  const auto pair = pair_outcomes(on.outcomes, off.outcomes);
  const auto tag = eval_tag(cfg);
  std::ostringstream csv;
  csv << "trial,success_aug_on,success_aug_off,path_cost_aug_on,path_cost_aug_off\n";
  for (std::size_t i = 0; i < on.outcomes.size(); ++i) {
    char a[32], b[32];
    std::snprintf(a, sizeof a, "%.10g", on.outcomes[i].path_cost);
    std::snprintf(b, sizeof b, "%.10g", off.outcomes[i].path_cost);
    csv << on.outcomes[i].trial << ',' << on.outcomes[i].success << ',' << off.outcomes[i].success << ',' << a << ','
        << b << '\n';
  }
  run.write_text(tag + ".csv", csv.str());
  const json summary{{"trials", on.trials},
                     {"success_rate_aug_on", on.success.rate},
                     {"success_rate_aug_off", off.success.rate},
                     {"ci95_aug_on", {on.success.lo, on.success.hi}},
                     {"ci95_aug_off", {off.success.lo, off.success.hi}},
                     {"margin", on.success.rate - off.success.rate},
                     {"both_succeed", pair.both},
                     {"only_aug_on", pair.only_first},
                     {"only_aug_off", pair.only_second},
                     {"neither", pair.neither},
                     {"mcnemar_exact_p", pair.p_value}};
  run.write_text(tag + ".json", summary.dump(2) + "\n");
  return run.finish(tag);
}

fs::path plan_demo_cmd(Run& run) {
  const auto& cfg = run.cfg();
  std::optional<Checkpoint> model;
  std::optional<Recalibration> recal;
  Predictor predictor;
  if (cfg.sim.source == WaypointSource::Model) {
    model = read_model(run, cfg.augment);
    predictor.model = &*model;
    if (cfg.recalibrate) {
      recal = read_recal(run, cfg.augment);
      predictor.recal = &*recal;
    }
  }
  ExperimentConfig single = cfg;
  single.paired_augment = false;
  const auto tag = eval_tag(single);
  TrialLog log;
  run_trial(cfg, predictor, 0, &log);
  write_trajectory_csv(log.records, run.output("trajectory_" + tag + ".csv"));
  return run.finish(tag);
}

}  // namespace

std::string arm_tag(bool augment) { return "aug_" + on_off(augment); }

std::string eval_tag(const ExperimentConfig& cfg) {
  std::string tag;
  if (cfg.sim.source == WaypointSource::Oracle) {
    tag = "oracle";
  } else {
    tag = (cfg.paired_augment ? std::string("paired") : arm_tag(cfg.augment)) + "_recal_" + on_off(cfg.recalibrate);
  }
  tag += "_fusion_" + on_off(cfg.fusion);
  if (cfg.sim.corrupt_fraction > 0.0) tag += "_corrupt";
  return tag;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingArtifact, "missing artifact " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return "fnv1a64:" + hex64(h);
}

std::pair<std::string, bool> parse_ablation(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) fail(ErrorCode::InvalidConfig, "ablation must look like name=on|off");
  const std::string name(text.substr(0, eq));
  const std::string value(text.substr(eq + 1));
  if (name != "augment" && name != "recal" && name != "fusion") {
    fail(ErrorCode::InvalidConfig, "unknown ablation " + name + " (augment, recal, fusion)");
  }
  if (value != "on" && value != "off") fail(ErrorCode::InvalidConfig, "ablation value must be on or off");
  return {name, value == "on"};
}

ExperimentConfig resolve_config(const RunRequest& request) {
  ExperimentConfig cfg = request.config ? load_config(*request.config) : ExperimentConfig{};
  if (request.seed) cfg.seed = *request.seed;
  if (request.trials) cfg.trials = *request.trials;
  for (const auto& [name, on] : request.ablations) {
    if (name == "augment") {
      cfg.augment = on;
      cfg.paired_augment = false;
    } else if (name == "recal") {
      cfg.recalibrate = on;
    } else if (name == "fusion") {
      cfg.fusion = on;
    } else {
      fail(ErrorCode::InvalidConfig, "unknown ablation " + name);
    }
  }
  cfg.validate();
  return cfg;
}

fs::path run_subcommand(const RunRequest& request) {
  const auto& sub = request.subcommand;
  if (std::find(kSubcommands.begin(), kSubcommands.end(), sub) == kSubcommands.end()) {
    fail(ErrorCode::InvalidConfig, "unknown subcommand " + sub);
  }
  ExperimentConfig cfg = resolve_config(request);
  std::error_code ec;
  fs::create_directories(request.out, ec);
  if (ec) fail(ErrorCode::MissingArtifact, "cannot create output directory " + request.out.string());
  Run run(sub, std::move(cfg), request.out);
  if (sub == "gen-data") return gen_data(run);
  if (sub == "train") return train_cmd(run);
  if (sub == "calibrate") return calibrate_cmd(run);
  if (sub == "eval-coverage") return eval_coverage_cmd(run);
  if (sub == "eval-success") return eval_success_cmd(run);
  return plan_demo_cmd(run);
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingArtifact:
      return 2;
    case ErrorCode::SchemaMismatch:
      return 3;
    case ErrorCode::NonFiniteLoss:
      return 4;
    case ErrorCode::InvalidConfig:
      return 5;
    default:
      return 1;
  }
}

}  // namespace ellipse
