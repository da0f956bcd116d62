#include "ellipse/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <exception>

#include "ellipse/error.hpp"

namespace ellipse {

namespace {

constexpr double kStraightOmega = 1e-9;

Matrix symmetrized(const Matrix& m) {
  Matrix s = m;
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double v = 0.5 * (m(i, j) + m(j, i));
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

Matrix inverse(const SpdMatrix& a) {
  const std::size_t d = a.dim();
  Matrix inv{d, d, std::vector<double>(d * d, 0.0)};
  for (std::size_t j = 0; j < d; ++j) {
    Vector e(d, 0.0);
    e[j] = 1.0;
    const Vector col = spd_solve(a, e);
    for (std::size_t i = 0; i < d; ++i) inv(i, j) = col[i];
  }
  return symmetrized(inv);
}

void check_prediction_shapes(const Vector& mean, const SpdMatrix& cov) {
  if (mean.size() != cov.dim()) fail(ErrorCode::DimensionMismatch, "waypoint mean and covariance differ in dimension");
}

}  // namespace

void WaypointBelief::tick() {
  for (auto& s : slots) ++s.age;
}

void WaypointBelief::advance(double distance) {
  if (slots.size() < 2 || distance == 0.0) return;
  const std::size_t n = slots.size();
  const std::size_t d = slots.front().mean.size();
  std::vector<Vector> pts;
  for (const auto& s : slots) pts.push_back(s.mean);
  std::vector<double> cum(n, 0.0);
  for (std::size_t k = 1; k < n; ++k) {
    double len = 0.0;
    for (std::size_t i = 0; i < d; ++i) len += (pts[k][i] - pts[k - 1][i]) * (pts[k][i] - pts[k - 1][i]);
    cum[k] = cum[k - 1] + std::sqrt(len);
  }
  if (!(cum.back() > 0.0)) return;
  auto point_at = [&](double s) {
    // Segment holding s; the first and last segments extend indefinitely.
    std::size_t a = 0;
    while (a + 2 < n && cum[a + 1] <= s) ++a;
    const double seg = cum[a + 1] - cum[a];
    const double f = seg > 0.0 ? (s - cum[a]) / seg : 0.0;
    Vector p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = pts[a][i] + f * (pts[a + 1][i] - pts[a][i]);
    return p;
  };
  for (std::size_t k = 0; k < n; ++k) slots[k].mean = point_at(cum[k] + distance);
}

WaypointBelief replace(const std::vector<WaypointPrediction>& preds) {
  WaypointBelief b;
  for (const auto& p : preds) {
    check_prediction_shapes(p.mean, p.cov);
    b.slots.push_back({p.mean, p.cov, 0});
  }
  return b;
}

WaypointBelief fuse(const WaypointBelief& belief, const std::vector<WaypointPrediction>& preds, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) fail(ErrorCode::InvalidConfig, "fusion decay must lie in (0, 1)");
  if (belief.empty()) return replace(preds);
  if (belief.slots.size() != preds.size()) fail(ErrorCode::DimensionMismatch, "belief and prediction slot counts differ");
  WaypointBelief out;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& old = belief.slots[k];
    const auto& p = preds[k];
    check_prediction_shapes(p.mean, p.cov);
    if (old.mean.size() != p.mean.size()) fail(ErrorCode::DimensionMismatch, "belief and prediction dimensions differ");
    if (old.age < 0) fail(ErrorCode::DomainError, "belief age must be nonnegative");
    const std::size_t d = p.mean.size();
    const double decay = std::pow(gamma, old.age);
    const Matrix lam_old = inverse(old.cov);
    const Matrix lam_new = inverse(p.cov);
    Matrix lam{d, d, std::vector<double>(d * d)};
    Vector rhs(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        lam(i, j) = decay * lam_old(i, j) + lam_new(i, j);
        rhs[i] += decay * lam_old(i, j) * old.mean[j] + lam_new(i, j) * p.mean[j];
      }
    }
    const SpdMatrix lam_chol = cholesky(symmetrized(lam));
    Vector mean = spd_solve(lam_chol, rhs);
    SpdMatrix cov = cholesky(inverse(lam_chol));
    out.slots.push_back({std::move(mean), std::move(cov), 0});
  }
  return out;
}

void MppiConfig::validate() const {
  const bool ok = rollouts >= 1 && horizon >= 1 && dt > 0.0 && lambda > 0.0 && noise_v >= 0.0 && noise_omega >= 0.0 &&
                  v_max > 0.0 && omega_max > 0.0 && gamma > 0.0 && gamma < 1.0 && confidence_floor >= 0.0 &&
                  weights.tracking >= 0.0 && weights.effort >= 0.0 && weights.corridor >= 0.0 && std::isfinite(dt) &&
                  std::isfinite(lambda);
  if (!ok) fail(ErrorCode::InvalidConfig, "invalid MPPI configuration");
}

std::vector<RobotState> rollout(const RobotState& state, const std::vector<Control>& controls, double dt, double v_max,
                                double omega_max) {
  std::vector<RobotState> traj;
  traj.reserve(controls.size());
  RobotState s = state;
  for (const Control& u : controls) {
    const double v = std::clamp(u.v, -v_max, v_max);
    const double w = std::clamp(u.omega, -omega_max, omega_max);
    if (std::abs(w) > kStraightOmega) {
      const double th1 = s.theta + w * dt;
      s.x += v / w * (std::sin(th1) - std::sin(s.theta));
      s.y -= v / w * (std::cos(th1) - std::cos(s.theta));
      s.theta = wrap_angle(th1);
    } else {
      s.x += v * std::cos(s.theta) * dt;
      s.y += v * std::sin(s.theta) * dt;
      s.theta = wrap_angle(s.theta + w * dt);
    }
    s.v = v;
    traj.push_back(s);
  }
  return traj;
}

double confidence_weight(const SpdMatrix& cov, double floor) { return 1.0 / (cov.trace() + floor); }

double trajectory_cost(const std::vector<RobotState>& traj, const std::vector<Control>& controls,
                       const WaypointBelief& belief, const Corridor& corridor, const CostWeights& w,
                       double confidence_floor) {
  if (belief.empty()) fail(ErrorCode::EmptyInput, "trajectory cost needs a nonempty belief");
  double tracking = 0.0;
  if (!traj.empty()) {
    for (const auto& slot : belief.slots) {
      if (slot.mean.size() != 2) fail(ErrorCode::DimensionMismatch, "planner waypoints must be planar");
      double best = std::numeric_limits<double>::infinity();
      for (const auto& s : traj) {
        const double r[2] = {s.x - slot.mean[0], s.y - slot.mean[1]};
        double q;
        if (w.mahalanobis) {
          const Vector z = forward_substitute(slot.cov, r);
          q = z[0] * z[0] + z[1] * z[1];
        } else {
          q = r[0] * r[0] + r[1] * r[1];
        }
        best = std::min(best, q);
      }
      tracking += (w.mahalanobis ? 1.0 : confidence_weight(slot.cov, confidence_floor)) * best;
    }
  }
  double effort = 0.0;
  for (const auto& u : controls) effort += u.v * u.v + u.omega * u.omega;
  int outside = 0;
  for (const auto& s : traj) outside += std::abs(s.y - corridor.center_y) > corridor.half_width ? 1 : 0;
  return w.tracking * tracking + w.effort * effort + w.corridor * outside;
}

namespace {

template <bool Parallel>
MppiResult mppi_impl(const RobotState& state, const std::vector<Control>& nominal, const MppiConfig& cfg, Rng& rng,
                     const RolloutCost& cost) {
  cfg.validate();
  const auto T = static_cast<std::size_t>(cfg.horizon);
  const auto K = static_cast<std::size_t>(cfg.rollouts);
  if (nominal.size() != T) fail(ErrorCode::DimensionMismatch, "nominal control length must equal the horizon");

  std::vector<Control> eps(K * T);
  for (auto& e : eps) {
    e.v = cfg.noise_v * normal(rng);
    e.omega = cfg.noise_omega * normal(rng);
  }

  MppiDiagnostics diag;
  diag.costs.assign(K, 0.0);
  std::exception_ptr error;
  auto score = [&](std::size_t i) {
    std::vector<Control> u(T);
    for (std::size_t t = 0; t < T; ++t) {
      u[t] = {nominal[t].v + eps[i * T + t].v, nominal[t].omega + eps[i * T + t].omega};
    }
    try {
      diag.costs[i] = cost(rollout(state, u, cfg.dt, cfg.v_max, cfg.omega_max), u);
    } catch (...) {
#pragma omp critical(ellipse_mppi_error)
      if (!error) error = std::current_exception();
    }
  };
  if constexpr (Parallel) {
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < K; ++i) score(i);
  } else {
    for (std::size_t i = 0; i < K; ++i) score(i);
  }
  if (error) std::rethrow_exception(error);

  double min_cost = std::numeric_limits<double>::infinity();
  double sum_cost = 0.0;
  std::size_t finite = 0;
  for (std::size_t i = 0; i < K; ++i) {
    const double c = diag.costs[i];
    if (std::isnan(c)) continue;
    if (c < min_cost) {
      min_cost = c;
      diag.best_index = static_cast<int>(i);
    }
    if (std::isfinite(c)) {
      sum_cost += c;
      ++finite;
    }
  }
  if (finite == 0) fail(ErrorCode::PlannerDegenerate, "every MPPI rollout cost is non-finite");
  diag.min_cost = min_cost;
  diag.mean_cost = sum_cost / static_cast<double>(finite);

  diag.weights.assign(K, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    const double c = diag.costs[i];
    if (std::isfinite(c)) diag.weights[i] = std::exp(-(c - min_cost) / cfg.lambda);
    z += diag.weights[i];
  }
  for (double& w : diag.weights) w /= z;
  for (double w : diag.weights) diag.weight_sum += w;

  MppiResult out;
  out.nominal = nominal;
  for (std::size_t t = 0; t < T; ++t) {
    double dv = 0.0, dw = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      dv += diag.weights[i] * eps[i * T + t].v;
      dw += diag.weights[i] * eps[i * T + t].omega;
    }
    out.nominal[t].v += dv;
    out.nominal[t].omega += dw;
  }
  out.applied = {std::clamp(out.nominal[0].v, -cfg.v_max, cfg.v_max),
                 std::clamp(out.nominal[0].omega, -cfg.omega_max, cfg.omega_max)};
  out.diagnostics = std::move(diag);
  return out;
}

}  // namespace

MppiResult mppi_update(const RobotState& state, const std::vector<Control>& nominal, const MppiConfig& config, Rng& rng,
                       const RolloutCost& cost) {
  return mppi_impl<true>(state, nominal, config, rng, cost);
}

MppiResult mppi_update_serial(const RobotState& state, const std::vector<Control>& nominal, const MppiConfig& config,
                              Rng& rng, const RolloutCost& cost) {
  return mppi_impl<false>(state, nominal, config, rng, cost);
}

MppiResult mppi_step(const RobotState& state, const std::vector<Control>& nominal, const WaypointBelief& belief,
                     const Corridor& corridor, const MppiConfig& config, Rng& rng) {
  if (belief.empty()) fail(ErrorCode::EmptyInput, "MPPI needs a nonempty waypoint belief");
  return mppi_update(state, nominal, config, rng, [&](const auto& traj, const auto& u) {
    return trajectory_cost(traj, u, belief, corridor, config.weights, config.confidence_floor);
  });
}

std::vector<Control> shift_nominal(const std::vector<Control>& nominal) {
  if (nominal.empty()) return nominal;
  std::vector<Control> out(nominal.begin() + 1, nominal.end());
  out.push_back({nominal.back().v, 0.0});
  return out;
}

void write_trajectory_csv(const std::vector<TrajectoryRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::MissingArtifact, "cannot write " + path.string());
  const std::size_t slots = records.empty() ? 0 : records.front().slot_means.size();
  out << "tick,x,y,theta,v,v_cmd,omega_cmd,min_cost,mean_cost";
  for (std::size_t k = 0; k < slots; ++k) out << ",slot" << k << "_x,slot" << k << "_y,slot" << k << "_trace";
  out << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out << ',' << buf;
  };
  for (const auto& r : records) {
    out << r.tick;
    num(r.state.x);
    num(r.state.y);
    num(r.state.theta);
    num(r.state.v);
    num(r.applied.v);
    num(r.applied.omega);
    num(r.min_cost);
    num(r.mean_cost);
    for (std::size_t k = 0; k < slots; ++k) {
      const bool has = k < r.slot_means.size() && k < r.slot_traces.size();
      num(has ? r.slot_means[k][0] : std::nan(""));
      num(has ? r.slot_means[k][1] : std::nan(""));
      num(has ? r.slot_traces[k] : std::nan(""));
    }
    out << '\n';
  }
}

}  // namespace ellipse
