#pragma once

// Feed-forward evidential regressor: tanh MLP whose output is split into
// per-waypoint raw slots and linked onto NIW evidence.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ellipse/evidential.hpp"

namespace ellipse {

/// Link constants: κ and Ψ-diagonal floors, ν margin above d − 1.
inline constexpr double kKappaFloor = 1e-3;
inline constexpr double kPsiDiagFloor = 1e-3;

struct HeadSpec {
  int waypoints = 8;
  int dim = 2;

  /// μ (d), κ (1), lower Cholesky of Ψ (d(d+1)/2), ν (1)
  int slots_per_waypoint() const { return dim + 1 + dim * (dim + 1) / 2 + 1; }
  int raw_size() const { return waypoints * slots_per_waypoint(); }
};

class Mlp {
 public:
  Mlp() = default;
  /// Zero-initialised network.
  explicit Mlp(std::vector<int> layer_dims);
  /// Glorot-uniform weights and zero biases drawn from `seed`.
  static Mlp random(std::vector<int> layer_dims, std::uint64_t seed);

  const std::vector<int>& layer_dims() const noexcept { return dims_; }
  std::size_t num_layers() const noexcept { return dims_.size() - 1; }
  int input_size() const { return dims_.front(); }
  int output_size() const { return dims_.back(); }

  /// Flat parameters: for each layer, the row-major (out × in) weights then the bias.
  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  double& weight(std::size_t layer, int out, int in);
  double weight(std::size_t layer, int out, int in) const;
  double& bias(std::size_t layer, int out);
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const;

  bool operator==(const Mlp& other) const = default;

 private:
  std::vector<int> dims_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Default architecture: two hidden tanh layers of 64 units.
std::vector<int> default_layer_dims(int features, const HeadSpec& head);

Vector forward(const Mlp& net, std::span<const double> features);

std::vector<NIWParams> link(std::span<const double> raw, int waypoints, int dim);

/// Forward pass followed by the link.
std::vector<NIWParams> predict(const Mlp& net, const HeadSpec& head, std::span<const double> features);

struct Sample {
  Vector features;
  /// waypoints × dim, row-major
  Vector targets;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean evidential loss over a per-waypoint head for one raw output vector,
/// with its gradient w.r.t. the raw slots (reverse-mode tape).
double head_loss_and_grad(std::span<const double> raw, std::span<const double> targets, const HeadSpec& head,
                          double lambda_reg, std::span<double> d_raw);

/// Mean loss over batch and waypoints with exact gradients. OpenMP over
/// fixed-size chunks reduced in chunk order, so results do not depend on the
/// thread count.
LossGrad loss_and_grad(const Mlp& net, const HeadSpec& head, std::span<const Sample> batch, double lambda_reg);

/// Single-threaded reference used to check the parallel kernel.
LossGrad loss_and_grad_serial(const Mlp& net, const HeadSpec& head, std::span<const Sample> batch,
                              double lambda_reg);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lambda_reg = kDefaultLambdaReg;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Mlp net;
  std::vector<double> loss_history;
};

TrainResult train(Mlp net, const HeadSpec& head, std::span<const Sample> dataset, const TrainConfig& config);

/// Adam state over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1, double beta2, double eps);
  void step(std::span<double> params, std::span<const double> grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Mlp net;
  HeadSpec head;
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ellipse
