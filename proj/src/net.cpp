#include "ellipse/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "ellipse/autodiff.hpp"
#include "ellipse/error.hpp"
#include "ellipse/rng.hpp"

namespace ellipse {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Samples per reduction chunk; fixed so the summation order never depends on threads.
constexpr std::size_t kChunk = 8;

struct Workspace {
  std::vector<Vector> acts;
  Vector delta;
  Vector delta_prev;
  Vector d_raw;
};

void forward_cached(const Mlp& net, std::span<const double> features, std::vector<Vector>& acts) {
  const auto& dims = net.layer_dims();
  if (static_cast<int>(features.size()) != dims.front())
    fail(ErrorCode::DimensionMismatch, "feature length " + std::to_string(features.size()) + " != " +
                                           std::to_string(dims.front()));
  acts.resize(dims.size());
  acts[0].assign(features.begin(), features.end());
  const auto& p = net.params();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l];
    const int out = dims[l + 1];
    const double* w = p.data() + net.weight_offset(l);
    const double* b = p.data() + net.bias_offset(l);
    const Vector& a = acts[l];
    Vector& z = acts[l + 1];
    z.assign(static_cast<std::size_t>(out), 0.0);
    const bool hidden = l + 2 < dims.size();
    for (int o = 0; o < out; ++o) {
      const double* row = w + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
      double s = b[o];
      for (int i = 0; i < in; ++i) s += row[i] * a[static_cast<std::size_t>(i)];
      z[static_cast<std::size_t>(o)] = hidden ? std::tanh(s) : s;
    }
  }
}

// Accumulates the gradient of `scale`·(sample loss) into grad; returns the sample loss.
double accumulate_sample(const Mlp& net, const HeadSpec& head, const Sample& sample, double lambda_reg,
                         double scale, std::span<double> grad, Workspace& ws) {
  forward_cached(net, sample.features, ws.acts);
  ws.d_raw.assign(static_cast<std::size_t>(head.raw_size()), 0.0);
  const double loss = head_loss_and_grad(ws.acts.back(), sample.targets, head, lambda_reg, ws.d_raw);

  const auto& dims = net.layer_dims();
  const auto& p = net.params();
  ws.delta.assign(ws.d_raw.begin(), ws.d_raw.end());
  for (double& g : ws.delta) g *= scale;
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const int in = dims[l];
    const int out = dims[l + 1];
    const Vector& a = ws.acts[l];
    double* gw = grad.data() + net.weight_offset(l);
    double* gb = grad.data() + net.bias_offset(l);
    for (int o = 0; o < out; ++o) {
      const double d = ws.delta[static_cast<std::size_t>(o)];
      gb[o] += d;
      if (d == 0.0) continue;
      double* row = gw + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
      for (int i = 0; i < in; ++i) row[i] += d * a[static_cast<std::size_t>(i)];
    }
    if (l == 0) break;
    const double* w = p.data() + net.weight_offset(l);
    ws.delta_prev.assign(static_cast<std::size_t>(in), 0.0);
    for (int o = 0; o < out; ++o) {
      const double d = ws.delta[static_cast<std::size_t>(o)];
      if (d == 0.0) continue;
      const double* row = w + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
      for (int i = 0; i < in; ++i) ws.delta_prev[static_cast<std::size_t>(i)] += row[i] * d;
    }
    for (int i = 0; i < in; ++i) {
      const double h = a[static_cast<std::size_t>(i)];
      ws.delta_prev[static_cast<std::size_t>(i)] *= 1.0 - h * h;
    }
    std::swap(ws.delta, ws.delta_prev);
  }
  return loss;
}

void check_batch(const Mlp& net, const HeadSpec& head, std::span<const Sample> batch) {
  if (batch.empty()) fail(ErrorCode::EmptyInput, "loss_and_grad needs a nonempty batch");
  if (net.output_size() != head.raw_size()) fail(ErrorCode::SlotMismatch, "network output does not match head");
  for (const Sample& s : batch)
    if (static_cast<int>(s.targets.size()) != head.waypoints * head.dim)
      fail(ErrorCode::DimensionMismatch, "target length does not match head");
}

void check_finite(const LossGrad& lg) {
  if (!std::isfinite(lg.loss)) fail(ErrorCode::NonFiniteLoss, "loss is not finite");
  for (double g : lg.grad)
    if (!std::isfinite(g)) fail(ErrorCode::NonFiniteLoss, "gradient is not finite");
}

}  // namespace

Mlp::Mlp(std::vector<int> layer_dims) : dims_(std::move(layer_dims)) {
  if (dims_.size() < 2) fail(ErrorCode::DimensionMismatch, "MLP needs at least input and output dims");
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    if (dims_[l] < 1 || dims_[l + 1] < 1) fail(ErrorCode::DimensionMismatch, "layer dims must be positive");
    offsets_.push_back(off);
    off += static_cast<std::size_t>(dims_[l]) * static_cast<std::size_t>(dims_[l + 1]) +
           static_cast<std::size_t>(dims_[l + 1]);
  }
  params_.assign(off, 0.0);
}

Mlp Mlp::random(std::vector<int> layer_dims, std::uint64_t seed) {
  Mlp net(std::move(layer_dims));
  Rng rng = make_rng(seed, "mlp-init");
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const int in = net.dims_[l];
    const int out = net.dims_[l + 1];
    const double bound = std::sqrt(6.0 / (in + out));
    for (int o = 0; o < out; ++o)
      for (int i = 0; i < in; ++i) net.weight(l, o, i) = uniform(rng, -bound, bound);
  }
  return net;
}

double& Mlp::weight(std::size_t layer, int out, int in) {
  return params_[offsets_[layer] + static_cast<std::size_t>(out) * static_cast<std::size_t>(dims_[layer]) +
                 static_cast<std::size_t>(in)];
}

double Mlp::weight(std::size_t layer, int out, int in) const {
  return params_[offsets_[layer] + static_cast<std::size_t>(out) * static_cast<std::size_t>(dims_[layer]) +
                 static_cast<std::size_t>(in)];
}

double& Mlp::bias(std::size_t layer, int out) { return params_[bias_offset(layer) + static_cast<std::size_t>(out)]; }

std::size_t Mlp::bias_offset(std::size_t layer) const {
  return offsets_[layer] + static_cast<std::size_t>(dims_[layer]) * static_cast<std::size_t>(dims_[layer + 1]);
}

std::vector<int> default_layer_dims(int features, const HeadSpec& head) {
  return {features, 64, 64, head.raw_size()};
}

Vector forward(const Mlp& net, std::span<const double> features) {
  std::vector<Vector> acts;
  forward_cached(net, features, acts);
  return std::move(acts.back());
}

std::vector<NIWParams> link(std::span<const double> raw, int waypoints, int dim) {
  const HeadSpec head{waypoints, dim};
  if (waypoints < 1 || dim < 1 || static_cast<int>(raw.size()) != head.raw_size())
    fail(ErrorCode::SlotMismatch, "raw length " + std::to_string(raw.size()) + " does not match " +
                                      std::to_string(waypoints) + " waypoints of dim " + std::to_string(dim));
  const auto d = static_cast<std::size_t>(dim);
  std::vector<NIWParams> out;
  out.reserve(static_cast<std::size_t>(waypoints));
  for (int h = 0; h < waypoints; ++h) {
    const double* s = raw.data() + static_cast<std::size_t>(h * head.slots_per_waypoint());
    Vector mu(s, s + d);
    const double kappa = softplus(s[d]) + kKappaFloor;
    std::vector<double> l(d * d, 0.0);
    std::size_t k = d + 1;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++k) l[i * d + j] = (i == j) ? softplus(s[k]) + kPsiDiagFloor : s[k];
    const double nu = (static_cast<double>(d) - 1.0 + kNuEpsilon) + softplus(s[k]);
    out.push_back(NIWParams{std::move(mu), kappa, SpdMatrix(d, std::move(l)), nu});
  }
  return out;
}

std::vector<NIWParams> predict(const Mlp& net, const HeadSpec& head, std::span<const double> features) {
  return link(forward(net, features), head.waypoints, head.dim);
}

double head_loss_and_grad(std::span<const double> raw, std::span<const double> targets, const HeadSpec& head,
                          double lambda_reg, std::span<double> d_raw) {
  const int slots = head.slots_per_waypoint();
  const auto d = static_cast<std::size_t>(head.dim);
  const double dd = static_cast<double>(d);
  if (static_cast<int>(raw.size()) != head.raw_size() || d_raw.size() != raw.size())
    fail(ErrorCode::SlotMismatch, "raw/gradient length does not match head");
  if (targets.size() != static_cast<std::size_t>(head.waypoints) * d)
    fail(ErrorCode::DimensionMismatch, "target length does not match head");

  for (double r : raw)
    if (!std::isfinite(r)) fail(ErrorCode::NonFiniteLoss, "network output is not finite");

  ad::Tape tape;
  const double inv_h = 1.0 / head.waypoints;
  double total = 0.0;
  std::vector<ad::Var> leaves(static_cast<std::size_t>(slots));
  std::vector<ad::Var> lower(d * d);
  std::vector<ad::Var> z(d);
  std::vector<ad::Var> resid(d);
  for (int h = 0; h < head.waypoints; ++h) {
    tape.clear();
    const std::size_t base = static_cast<std::size_t>(h * slots);
    for (std::size_t s = 0; s < leaves.size(); ++s) leaves[s] = tape.leaf(raw[base + s]);
    const double* y = targets.data() + static_cast<std::size_t>(h) * d;

    const ad::Var kappa = ad::softplus(leaves[d]) + kKappaFloor;
    std::size_t k = d + 1;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++k)
        lower[i * d + j] = (i == j) ? ad::softplus(leaves[k]) + kPsiDiagFloor : leaves[k];
    const ad::Var nu = ad::softplus(leaves[k]) + (dd - 1.0 + kNuEpsilon);
    const ad::Var dof = nu - (dd - 1.0);
    // predictive scale = c·Ψ
    const ad::Var c = (kappa + 1.0) / (kappa * dof);

    for (std::size_t i = 0; i < d; ++i) resid[i] = y[i] - leaves[i];
    ad::Var m2_psi = tape.leaf(0.0);
    ad::Var log_diag = tape.leaf(0.0);
    for (std::size_t i = 0; i < d; ++i) {
      ad::Var acc = resid[i];
      for (std::size_t j = 0; j < i; ++j) acc = acc - lower[i * d + j] * z[j];
      z[i] = acc / lower[i * d + i];
      m2_psi = m2_psi + z[i] * z[i];
      log_diag = log_diag + ad::log(lower[i * d + i]);
    }
    const ad::Var m2 = m2_psi / c;
    const ad::Var log_det = dd * ad::log(c) + 2.0 * log_diag;
    const ad::Var half_sum = (dof + dd) * 0.5;
    const ad::Var lp = ad::lgamma(half_sum) - ad::lgamma(dof * 0.5) - 0.5 * dd * ad::log(dof * std::numbers::pi) -
                       0.5 * log_det - half_sum * ad::log1p(m2 / dof);
    ad::Var loss = -lp;
    if (lambda_reg != 0.0) {
      ad::Var l1 = ad::abs(resid[0]);
      for (std::size_t i = 1; i < d; ++i) l1 = l1 + ad::abs(resid[i]);
      loss = loss + lambda_reg * l1 * (kappa + nu);
    }
    total += loss.value();
    const std::vector<double> adj = tape.gradient(loss);
    for (std::size_t s = 0; s < leaves.size(); ++s)
      d_raw[base + s] = adj[static_cast<std::size_t>(leaves[s].index())] * inv_h;
  }
  return total * inv_h;
}

LossGrad loss_and_grad_serial(const Mlp& net, const HeadSpec& head, std::span<const Sample> batch,
                              double lambda_reg) {
  check_batch(net, head, batch);
  LossGrad out;
  out.grad.assign(net.params().size(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  Workspace ws;
  for (const Sample& s : batch) out.loss += accumulate_sample(net, head, s, lambda_reg, scale, out.grad, ws);
  out.loss *= scale;
  check_finite(out);
  return out;
}

LossGrad loss_and_grad(const Mlp& net, const HeadSpec& head, std::span<const Sample> batch, double lambda_reg) {
  check_batch(net, head, batch);
  const std::size_t n = batch.size();
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  const std::size_t np = net.params().size();
  const double scale = 1.0 / static_cast<double>(n);
  std::vector<double> chunk_grad(chunks * np, 0.0);
  std::vector<double> chunk_loss(chunks, 0.0);
  std::vector<int> errors(chunks, 0);

#pragma omp parallel
  {
    Workspace ws;
#pragma omp for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
      const auto cu = static_cast<std::size_t>(c);
      std::span<double> g(chunk_grad.data() + cu * np, np);
      try {
        for (std::size_t i = cu * kChunk; i < std::min(n, (cu + 1) * kChunk); ++i)
          chunk_loss[cu] += accumulate_sample(net, head, batch[i], lambda_reg, scale, g, ws);
      } catch (...) {
        errors[cu] = 1;
      }
    }
  }
  if (std::find(errors.begin(), errors.end(), 1) != errors.end()) {
    // Re-run serially to surface the original exception.
    return loss_and_grad_serial(net, head, batch, lambda_reg);
  }

  LossGrad out;
  out.grad.assign(chunk_grad.begin(), chunk_grad.begin() + static_cast<std::ptrdiff_t>(np));
  out.loss = chunk_loss[0];
  for (std::size_t c = 1; c < chunks; ++c) {
    const double* g = chunk_grad.data() + c * np;
    for (std::size_t i = 0; i < np; ++i) out.grad[i] += g[i];
    out.loss += chunk_loss[c];
  }
  out.loss *= scale;
  check_finite(out);
  return out;
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
  }
}

TrainResult train(Mlp net, const HeadSpec& head, std::span<const Sample> dataset, const TrainConfig& config) {
  if (dataset.empty()) fail(ErrorCode::EmptyInput, "training dataset is empty");
  if (config.batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  TrainResult result;
  Adam adam(net.params().size(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
  std::vector<std::size_t> order(dataset.size());
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(config.seed, "train-epoch", static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(dataset[order[i]]);
      LossGrad lg;
      try {
        lg = loss_and_grad(net, head, batch, config.lambda_reg);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFiniteLoss)
          fail(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + ": " + e.what());
        throw;
      }
      epoch_loss += lg.loss * static_cast<double>(end - start);
      adam.step(net.params(), lg.grad);
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.net = std::move(net);
  return result;
}

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  using nlohmann::json;
  json layers = json::array();
  const Mlp& net = ckpt.net;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto begin = net.params().begin();
    json w(std::vector<double>(begin + static_cast<std::ptrdiff_t>(net.weight_offset(l)),
                               begin + static_cast<std::ptrdiff_t>(net.bias_offset(l))));
    json b(std::vector<double>(begin + static_cast<std::ptrdiff_t>(net.bias_offset(l)),
                               begin + static_cast<std::ptrdiff_t>(net.bias_offset(l)) + net.layer_dims()[l + 1]));
    layers.push_back({{"rows", net.layer_dims()[l + 1]}, {"cols", net.layer_dims()[l]}, {"weights", w}, {"bias", b}});
  }
  json doc = {{"format", "ellipse-evidential-mlp"},
              {"version", kCheckpointVersion},
              {"layer_dims", net.layer_dims()},
              {"activation", "tanh"},
              {"waypoints", ckpt.head.waypoints},
              {"dim", ckpt.head.dim},
              {"link", {{"kappa_floor", kKappaFloor}, {"psi_diag_floor", kPsiDiagFloor}, {"nu_epsilon", kNuEpsilon}}},
              {"layers", layers}};
  return doc.dump() + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
    if (doc.at("format") != "ellipse-evidential-mlp" || doc.at("version").get<int>() != kCheckpointVersion)
      fail(ErrorCode::SchemaMismatch, "unsupported checkpoint format or version");
    const auto& lk = doc.at("link");
    if (lk.at("kappa_floor").get<double>() != kKappaFloor || lk.at("psi_diag_floor").get<double>() != kPsiDiagFloor ||
        lk.at("nu_epsilon").get<double>() != kNuEpsilon)
      fail(ErrorCode::SchemaMismatch, "checkpoint link constants differ from this build");
    Checkpoint ckpt{Mlp(doc.at("layer_dims").get<std::vector<int>>()),
                    HeadSpec{doc.at("waypoints").get<int>(), doc.at("dim").get<int>()}};
    if (ckpt.net.output_size() != ckpt.head.raw_size())
      fail(ErrorCode::SchemaMismatch, "checkpoint output size does not match its head");
    const auto& layers = doc.at("layers");
    if (layers.size() != ckpt.net.num_layers()) fail(ErrorCode::SchemaMismatch, "layer count mismatch");
    auto& p = ckpt.net.params();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto w = layers[l].at("weights").get<std::vector<double>>();
      const auto b = layers[l].at("bias").get<std::vector<double>>();
      if (w.size() != ckpt.net.bias_offset(l) - ckpt.net.weight_offset(l) ||
          b.size() != static_cast<std::size_t>(ckpt.net.layer_dims()[l + 1]))
        fail(ErrorCode::SchemaMismatch, "layer " + std::to_string(l) + " has wrong parameter count");
      std::copy(w.begin(), w.end(), p.begin() + static_cast<std::ptrdiff_t>(ckpt.net.weight_offset(l)));
      std::copy(b.begin(), b.end(), p.begin() + static_cast<std::ptrdiff_t>(ckpt.net.bias_offset(l)));
    }
    return ckpt;
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaMismatch, std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  out << checkpoint_to_json(ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingArtifact, "missing model checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace ellipse
