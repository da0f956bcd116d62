// Command-line driver for the stair-climbing experiment pipeline.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ellipse/error.hpp"
#include "ellipse/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Evidential waypoint prediction for stair climbing: data, training, calibration, evaluation"};
  app.require_subcommand(1, 1);

  std::string config;
  std::uint64_t seed = 0;
  std::string out = ".";
  int trials = 0;
  std::vector<std::string> ablations;

  const auto descriptions = std::vector<std::pair<std::string, std::string>>{
      {"gen-data", "render train, calibration and held-out evaluation splits"},
      {"train", "train the evidential waypoint model (--ablate augment=on|off)"},
      {"calibrate", "fit the isotonic recalibration map on the calibration split"},
      {"eval-coverage", "coverage table with and without recalibration on held-out stairs"},
      {"eval-success", "closed-loop success trials on unseen stairs"},
      {"plan-demo", "one closed-loop episode with a per-tick trajectory dump"},
  };
  std::vector<CLI::Option*> seed_opts, trial_opts;
  for (const auto& [name, help] : descriptions) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "JSON config or run manifest");
    seed_opts.push_back(sub->add_option("--seed", seed, "root seed (overrides the config)"));
    sub->add_option("--out", out, "artifact directory")->capture_default_str();
    trial_opts.push_back(sub->add_option("--trials", trials, "closed-loop trial count")->check(CLI::NonNegativeNumber));
    sub->add_option("--ablate", ablations, "augment|recal|fusion=on|off (repeatable)");
  }

  CLI11_PARSE(app, argc, argv);

  ellipse::RunRequest request;
  request.subcommand = app.get_subcommands().front()->get_name();
  if (!config.empty()) request.config = config;
  for (auto* o : seed_opts) {
    if (o->count() > 0) request.seed = seed;
  }
  for (auto* o : trial_opts) {
    if (o->count() > 0) request.trials = trials;
  }
  request.out = out;
  try {
    for (const auto& a : ablations) request.ablations.push_back(ellipse::parse_ablation(a));
    const auto manifest = ellipse::run_subcommand(request);
    std::cout << request.subcommand << ": wrote " << manifest.string() << '\n';
    return 0;
  } catch (const ellipse::Error& e) {
    std::cerr << "ellipse " << request.subcommand << ": " << e.what() << '\n';
    return ellipse::exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ellipse " << request.subcommand << ": " << e.what() << '\n';
    return 1;
  }
}
