#include <doctest.h>

#include <cmath>
#include <random>

#include "ellipse/error.hpp"
#include "ellipse/net.hpp"
#include "ellipse/rng.hpp"

using namespace ellipse;

namespace {

std::vector<Sample> random_batch(std::size_t n, int features, const HeadSpec& head, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Sample> batch(n);
  for (Sample& s : batch) {
    s.features.resize(static_cast<std::size_t>(features));
    for (double& x : s.features) x = u(rng);
    s.targets.resize(static_cast<std::size_t>(head.waypoints * head.dim));
    for (double& y : s.targets) y = 2.0 * u(rng);
  }
  return batch;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("forward") {
  const Mlp zero({5, 7, 3});
  const Vector out = forward(zero, Vector{1, 2, 3, 4, 5});
  for (double v : out) CHECK(v == 0.0);

  Mlp lin({3, 3});
  for (int i = 0; i < 3; ++i) lin.weight(0, i, i) = 1.0;
  const Vector x{0.3, -2.0, 7.5};
  CHECK(forward(lin, x) == x);

  const Mlp a = Mlp::random({4, 16, 16, 7}, 99);
  const Mlp b = Mlp::random({4, 16, 16, 7}, 99);
  CHECK(forward(a, Vector{0.1, 0.2, 0.3, 0.4}) == forward(b, Vector{0.1, 0.2, 0.3, 0.4}));

  CHECK_THROWS_AS(forward(a, Vector{1.0}), Error);
}

TEST_CASE("link") {
  const HeadSpec head{1, 2};
  const Vector raw(static_cast<std::size_t>(head.raw_size()), 0.0);
  const std::vector<NIWParams> niw = link(raw, 1, 2);
  REQUIRE(niw.size() == 1);
  CHECK(niw[0].kappa == doctest::Approx(std::log(2.0) + 1e-3).epsilon(1e-14));
  CHECK(niw[0].nu == doctest::Approx(1.001 + std::log(2.0)).epsilon(1e-14));
  CHECK(niw[0].psi.chol(0, 0) == doctest::Approx(std::log(2.0) + 1e-3));
  CHECK(niw[0].psi.chol(1, 1) == doctest::Approx(std::log(2.0) + 1e-3));
  CHECK(niw[0].psi.chol(1, 0) == 0.0);
  CHECK(niw[0].mu == Vector{0.0, 0.0});

  Vector neg = raw;
  neg[2] = -800.0;
  const NIWParams floor = link(neg, 1, 2)[0];
  CHECK(floor.kappa > 0.0);
  CHECK(floor.kappa == doctest::Approx(1e-3));

  CHECK_THROWS_AS(link(Vector(6, 0.0), 1, 2), Error);
  try {
    link(Vector(6, 0.0), 1, 2);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SlotMismatch);
  }
}

TEST_CASE("link totality on random raw vectors") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-60.0, 60.0);
  const HeadSpec head{3, 2};
  Vector raw(static_cast<std::size_t>(head.raw_size()));
  int violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    for (double& r : raw) r = u(rng) * (trial % 3 == 0 ? 0.05 : 1.0);
    for (const NIWParams& n : link(raw, head.waypoints, head.dim)) {
      try {
        n.validate();
        predictive(n);
      } catch (const Error&) {
        ++violations;
      }
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("tape head loss agrees with the NIW loss route") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int d : {1, 2, 3}) {
    const HeadSpec head{4, d};
    Vector raw(static_cast<std::size_t>(head.raw_size()));
    Vector y(static_cast<std::size_t>(head.waypoints * d));
    for (int trial = 0; trial < 50; ++trial) {
      for (double& r : raw) r = u(rng);
      for (double& t : y) t = u(rng);
      Vector g(raw.size());
      const double tape = head_loss_and_grad(raw, y, head, 0.05, g);
      const auto niw = link(raw, head.waypoints, d);
      double ref = 0.0;
      for (int h = 0; h < head.waypoints; ++h)
        ref += evidential_loss(niw[static_cast<std::size_t>(h)],
                               std::span<const double>(y).subspan(static_cast<std::size_t>(h * d), static_cast<std::size_t>(d)),
                               0.05);
      CHECK(tape == doctest::Approx(ref / head.waypoints).epsilon(1e-12));
    }
  }
}

TEST_CASE("reverse-mode gradients match central finite differences") {
  const HeadSpec head{2, 2};
  Mlp net = Mlp::random({5, 12, head.raw_size()}, 4);
  const auto batch = random_batch(4, 5, head, 21);
  const LossGrad lg = loss_and_grad_serial(net, head, batch, 0.02);
  int checked = 0;
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    const double saved = net.params()[i];
    net.params()[i] = saved + 1e-5;
    const double up = loss_and_grad_serial(net, head, batch, 0.02).loss;
    net.params()[i] = saved - 1e-5;
    const double down = loss_and_grad_serial(net, head, batch, 0.02).loss;
    net.params()[i] = saved;
    const double fd = (up - down) / 2e-5;
    CHECK(rel_err(lg.grad[i], fd) <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 200);
}

TEST_CASE("batch mean invariance and parallel reduction") {
  const HeadSpec head{3, 2};
  const Mlp net = Mlp::random({6, 16, 16, head.raw_size()}, 12);
  const auto batch = random_batch(11, 6, head, 5);
  std::vector<Sample> doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  const LossGrad a = loss_and_grad(net, head, batch, 0.01);
  const LossGrad b = loss_and_grad(net, head, doubled, 0.01);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-13));
  for (std::size_t i = 0; i < a.grad.size(); ++i) CHECK(a.grad[i] == doctest::Approx(b.grad[i]).epsilon(1e-10).scale(1e-12));

  const LossGrad s = loss_and_grad_serial(net, head, batch, 0.01);
  CHECK(a.loss == doctest::Approx(s.loss).epsilon(1e-13));
  for (std::size_t i = 0; i < a.grad.size(); ++i) CHECK(std::abs(a.grad[i] - s.grad[i]) <= 1e-12 * (1 + std::abs(s.grad[i])));

  CHECK_THROWS_AS(loss_and_grad(net, head, std::span<const Sample>{}, 0.01), Error);
}

TEST_CASE("regularizer gradient vanishes when targets sit on the mean") {
  const HeadSpec head{2, 2};
  const Mlp net = Mlp::random({3, 8, head.raw_size()}, 1);
  Sample s{{0.4, -0.3, 0.9}, {}};
  const auto niw = predict(net, head, s.features);
  for (const NIWParams& n : niw) s.targets.insert(s.targets.end(), n.mu.begin(), n.mu.end());
  const std::vector<Sample> batch{s};
  const LossGrad with_reg = loss_and_grad(net, head, batch, 0.7);
  const LossGrad without = loss_and_grad(net, head, batch, 0.0);
  CHECK(with_reg.loss == doctest::Approx(without.loss).epsilon(1e-14));
  for (std::size_t i = 0; i < with_reg.grad.size(); ++i) CHECK(with_reg.grad[i] == without.grad[i]);
}

TEST_CASE("non-finite loss is reported") {
  const HeadSpec head{1, 2};
  Mlp net({2, head.raw_size()});
  const std::vector<Sample> batch{{{std::nan(""), 0.0}, {0.0, 0.0}}};
  try {
    loss_and_grad(net, head, batch, 0.0);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
  }
}

TEST_CASE("train determinism and zero epochs") {
  const HeadSpec head{2, 2};
  const auto data = random_batch(40, 4, head, 9);
  const Mlp init = Mlp::random({4, 16, 16, head.raw_size()}, 3);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK(train(init, head, data, cfg).net == init);
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 77;
  const TrainResult a = train(init, head, data, cfg);
  const TrainResult b = train(init, head, data, cfg);
  CHECK(a.net == b.net);
  CHECK(a.loss_history == b.loss_history);
  CHECK(a.loss_history.size() == 3);
}

TEST_CASE("overfitting one observation approaches the best attainable NLL") {
  // One feature vector with a set of relabelled targets drawn from a
  // Student-t: with a single exact target the NLL is unbounded below, so the
  // attainable optimum is taken over this finite set.
  const HeadSpec head{1, 2};
  const Vector features{0.5, -0.2, 0.1};
  std::vector<Vector> targets;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  std::chi_squared_distribution<double> chi(4.0);
  for (int i = 0; i < 40; ++i) {
    const double w = std::sqrt(4.0 / chi(rng));
    const double z0 = n01(rng), z1 = n01(rng);
    targets.push_back({1.0 + 0.2 * w * z0, 0.2 + w * (0.05 * z0 + 0.1 * z1)});
  }
  std::vector<Sample> data;
  for (const Vector& t : targets) data.push_back({features, t});
  const double n = static_cast<double>(targets.size());

  // Oracle: optimise the raw head slots directly with a long run.
  Vector raw(static_cast<std::size_t>(head.raw_size()), 0.0);
  Adam adam(raw.size(), 0.01, 0.9, 0.999, 1e-8);
  Vector g(raw.size()), total(raw.size());
  double best = 0.0;
  for (int step = 0; step < 20000; ++step) {
    std::fill(total.begin(), total.end(), 0.0);
    best = 0.0;
    for (const Vector& t : targets) {
      best += head_loss_and_grad(raw, t, head, 0.0, g) / n;
      for (std::size_t i = 0; i < g.size(); ++i) total[i] += g[i] / n;
    }
    adam.step(raw, total);
  }

  TrainConfig cfg;
  cfg.epochs = 600;
  cfg.batch_size = 40;
  cfg.lambda_reg = 0.0;
  const TrainResult res = train(Mlp::random(default_layer_dims(3, head), 5), head, data, cfg);
  const double final_nll = loss_and_grad(res.net, head, data, 0.0).loss;
  MESSAGE("oracle best " << best << ", trained " << final_nll);
  CHECK(std::abs(final_nll - best) <= 0.05 * std::abs(best));
  for (std::size_t e = 11; e < res.loss_history.size(); ++e)
    CHECK(res.loss_history[e] <= res.loss_history[e - 1] + 0.05 * std::abs(res.loss_history[e - 1]));
}

TEST_CASE("training on Gaussian targets recovers location and covariance") {
  const HeadSpec head{1, 2};
  const double mu[2] = {0.7, -0.3};
  const double l00 = 0.2, l10 = 0.05, l11 = 0.12;  // Σ* = L Lᵀ
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n01(0.0, 1.0);
  const Vector features{0.3, -0.6, 0.2};
  std::vector<Sample> data(2000);
  for (Sample& s : data) {
    const double z0 = n01(rng), z1 = n01(rng);
    s.features = features;
    s.targets = {mu[0] + l00 * z0, mu[1] + l10 * z0 + l11 * z1};
  }
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.lambda_reg = 0.0;
  cfg.learning_rate = 3e-3;
  const TrainResult res = train(Mlp::random(default_layer_dims(3, head), 2), head, data, cfg);
  const StudentTPredictive t = predictive(predict(res.net, head, features)[0]);
  CHECK(std::hypot(t.loc[0] - mu[0], t.loc[1] - mu[1]) <= 0.05);

  const Matrix cov = t.covariance();
  const double s00 = l00 * l00, s01 = l00 * l10, s11 = l10 * l10 + l11 * l11;
  auto eig = [](double a, double b, double c) {
    const double m = 0.5 * (a + c), r = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
    return std::pair{m - r, m + r};
  };
  const auto [e_lo, e_hi] = eig(cov(0, 0), cov(0, 1), cov(1, 1));
  const auto [t_lo, t_hi] = eig(s00, s01, s11);
  MESSAGE("dof " << t.dof << " eig " << e_lo << "," << e_hi << " vs " << t_lo << "," << t_hi);
  CHECK(e_lo / t_lo <= 1.5);
  CHECK(t_lo / e_lo <= 1.5);
  CHECK(e_hi / t_hi <= 1.5);
  CHECK(t_hi / e_hi <= 1.5);
}

TEST_CASE("checkpoint round trip") {
  const HeadSpec head{3, 2};
  const Checkpoint ckpt{Mlp::random({5, 8, head.raw_size()}, 2), head};
  const std::string text = checkpoint_to_json(ckpt);
  const Checkpoint back = checkpoint_from_json(text);
  CHECK(back.net == ckpt.net);
  CHECK(back.head.waypoints == 3);
  CHECK(checkpoint_to_json(back) == text);

  try {
    checkpoint_from_json(R"({"format":"ellipse-evidential-mlp","version":99})");
    FAIL("expected SchemaMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaMismatch);
  }
}
