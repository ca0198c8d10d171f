#pragma once

// Dynamics: discrete SGD, its Gaussian approximation, the Euler–Maruyama
// diffusion, the gradient-flow ODE, the eigenbasis OU process and the
// fluctuation process around the flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgdscope/error.hpp"
#include "sgdscope/linalg.hpp"
#include "sgdscope/problems.hpp"
#include "sgdscope/rng.hpp"

namespace sgdscope {

enum class Sampling { with_replacement, without_replacement };

struct SgdConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 1;
  std::int64_t steps = 1;
  std::uint64_t seed = 0;
  Sampling sampling = Sampling::with_replacement;
  std::int64_t record_stride = 1;
  bool snapshots = false;
  // Stop (without error) once ‖θ‖ exceeds this; the divergence guard still applies.
  double escape_norm = std::numeric_limits<double>::infinity();
};

struct TrajectoryRecord {
  std::int64_t step = 0;
  double t = 0.0;
  double loss = 0.0;
  double grad_norm_sq = 0.0;
};

/// Time series produced by every integrator. Record times are step·h where h
/// is the integrator's step (δ for SGD, dt for the continuous-time schemes).
/// Snapshots, when kept, are stored flat: record i occupies
/// [i·dim, (i+1)·dim).
struct Trajectory {
  double step_size = 0.0;
  std::int64_t record_stride = 1;
  std::vector<TrajectoryRecord> records;
  Eigen::Index snapshot_dim = 0;
  std::vector<double> snapshots;
  std::vector<double> velocities;  // gradient flow only: −∇f at each snapshot
  bool snapshots_dropped = false;
  std::optional<std::int64_t> escaped_at;

  bool has_snapshots() const { return snapshot_dim > 0 && snapshots.size() == records.size() * static_cast<std::size_t>(snapshot_dim); }

  Eigen::Map<const Eigen::VectorXd> snapshot(std::size_t i) const {
    return {snapshots.data() + i * static_cast<std::size_t>(snapshot_dim), snapshot_dim};
  }
  Eigen::Map<const Eigen::VectorXd> velocity(std::size_t i) const {
    return {velocities.data() + i * static_cast<std::size_t>(snapshot_dim), snapshot_dim};
  }
};

inline constexpr double kDivergenceNorm = 1e12;
inline constexpr double kSnapshotBudget = 1e7;

namespace detail {

class Recorder {
 public:
  Recorder(Trajectory& traj, double step_size, std::int64_t stride, std::int64_t steps, Eigen::Index dim,
           bool want_snapshots)
      : traj_(traj), stride_(stride), steps_(steps) {
    traj_.step_size = step_size;
    traj_.record_stride = stride;
    const std::int64_t n_records = steps / stride + 2;
    traj_.records.reserve(static_cast<std::size_t>(n_records));
    if (want_snapshots) {
      if (static_cast<double>(dim) * static_cast<double>(n_records) <= kSnapshotBudget) {
        traj_.snapshot_dim = dim;
        traj_.snapshots.reserve(static_cast<std::size_t>(n_records * dim));
      } else {
        traj_.snapshots_dropped = true;
      }
    }
  }

  bool due(std::int64_t k) const { return k % stride_ == 0 || k == steps_; }

  void record(std::int64_t k, double loss, double grad_norm_sq, const Eigen::VectorXd& x) {
    traj_.records.push_back({k, static_cast<double>(k) * traj_.step_size, loss, grad_norm_sq});
    if (traj_.snapshot_dim > 0) traj_.snapshots.insert(traj_.snapshots.end(), x.data(), x.data() + x.size());
  }

  void record_velocity(const Eigen::VectorXd& v) {
    if (traj_.snapshot_dim > 0) traj_.velocities.insert(traj_.velocities.end(), v.data(), v.data() + v.size());
  }

 private:
  Trajectory& traj_;
  std::int64_t stride_;
  std::int64_t steps_;
};

inline void check_finite_start(const LossModel& model, const ParamVector& theta0) {
  if (theta0.size() != model.param_dim())
    throw Error("engine", "initial point has dimension " + std::to_string(theta0.size()) + ", model expects " +
                              std::to_string(model.param_dim()));
  if (!theta0.allFinite()) throw Error("engine", "initial point has non-finite entries");
}

// Returns true when the iterate has left the divergence ball or is non-finite.
inline bool diverged(const Eigen::VectorXd& x) {
  const double n = x.norm();
  return !std::isfinite(n) || n > kDivergenceNorm;
}

inline void check_sgd_config(const LossModel& model, const SgdConfig& cfg) {
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    throw Error("engine", "learning_rate must be > 0");
  if (cfg.batch_size < 1) throw Error("engine", "batch_size must be >= 1");
  if (!model.synthesized_noise() && cfg.batch_size > model.example_count())
    throw Error("engine", "batch_size " + std::to_string(cfg.batch_size) + " exceeds example count " +
                              std::to_string(model.example_count()));
  if (cfg.steps < 1) throw Error("engine", "steps must be >= 1");
  if (cfg.record_stride < 1) throw Error("engine", "record_stride must be >= 1");
}

// Draws minibatch indices per the sampling mode.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t m, Sampling mode) : n_(n), m_(m), mode_(mode), batch_(m) {
    if (n_ == 0) std::iota(batch_.begin(), batch_.end(), std::size_t{0});
    if (mode_ == Sampling::without_replacement && n_ > 0) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      cursor_ = n_;
    }
  }

  const std::vector<std::size_t>& next(Rng& rng) {
    if (n_ == 0) return batch_;
    if (mode_ == Sampling::with_replacement) {
      for (auto& j : batch_) j = rng.index(n_);
    } else {
      if (cursor_ + m_ > n_) {
        std::shuffle(perm_.begin(), perm_.end(), rng.engine());
        cursor_ = 0;
      }
      std::copy_n(perm_.begin() + static_cast<std::ptrdiff_t>(cursor_), m_, batch_.begin());
      cursor_ += m_;
    }
    return batch_;
  }

 private:
  std::size_t n_, m_;
  Sampling mode_;
  std::vector<std::size_t> batch_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
};

}  // namespace detail

/// θ_{k+1} = θ_k − δ·g^(m)(θ_k) with minibatches drawn from cfg.seed.
inline Trajectory sgd_run(const LossModel& model, const ParamVector& theta0, const SgdConfig& cfg) {
  detail::check_sgd_config(model, cfg);
  detail::check_finite_start(model, theta0);
  Rng rng(cfg.seed);
  detail::BatchSampler sampler(model.example_count(), cfg.batch_size, cfg.sampling);

  Trajectory traj;
  detail::Recorder rec(traj, cfg.learning_rate, cfg.record_stride, cfg.steps, model.param_dim(), cfg.snapshots);
  ParamVector theta = theta0;
  auto record = [&](std::int64_t k) {
    const double loss = model.loss(theta);
    if (!std::isfinite(loss)) throw DivergenceError(k);
    rec.record(k, loss, model.full_grad(theta).squaredNorm(), theta);
  };
  record(0);
  for (std::int64_t k = 1; k <= cfg.steps; ++k) {
    const auto& batch = sampler.next(rng);
    theta -= cfg.learning_rate * model.minibatch_grad_unchecked(theta, batch, rng);
    if (detail::diverged(theta)) throw DivergenceError(k);
    if (theta.norm() > cfg.escape_norm) {
      record(k);
      traj.escaped_at = k;
      break;
    }
    if (rec.due(k)) record(k);
  }
  return traj;
}

/// θ_{k+1} = θ_k − δ·∇L(θ_k) + (δ/√m)·R·ξ_k with R·Rᵀ = C.
///
/// C is taken from `pinned_cov` when given, otherwise from the model's exact
/// covariance at θ₀ (constant for the quadratic model).
inline Trajectory gaussian_sgd_run(const LossModel& model, const ParamVector& theta0, const SgdConfig& cfg,
                                   const std::optional<SymMatrix>& pinned_cov = std::nullopt) {
  detail::check_sgd_config(model, cfg);
  detail::check_finite_start(model, theta0);
  std::optional<SymMatrix> cov = pinned_cov ? pinned_cov : model.exact_gradient_covariance(theta0);
  if (!cov)
    throw Error("engine", "gaussian_sgd_run: model has no closed-form gradient covariance; pin one explicitly");
  if (cov->dim() != model.param_dim()) throw Error("engine", "gaussian_sgd_run: pinned covariance has wrong dim");
  const Matrix r = sqrt_spd(*cov);
  const bool noisy = !r.isZero(0.0);
  const double noise_scale = cfg.learning_rate / std::sqrt(static_cast<double>(cfg.batch_size));

  Rng rng(cfg.seed);
  Trajectory traj;
  detail::Recorder rec(traj, cfg.learning_rate, cfg.record_stride, cfg.steps, model.param_dim(), cfg.snapshots);
  ParamVector theta = theta0;
  ParamVector xi(model.param_dim());
  auto record = [&](std::int64_t k) {
    const double loss = model.loss(theta);
    if (!std::isfinite(loss)) throw DivergenceError(k);
    rec.record(k, loss, model.full_grad(theta).squaredNorm(), theta);
  };
  record(0);
  for (std::int64_t k = 1; k <= cfg.steps; ++k) {
    theta -= cfg.learning_rate * model.full_grad(theta);
    if (noisy) {
      rng.fill_normal(xi);
      theta.noalias() += noise_scale * (r * xi);
    }
    if (detail::diverged(theta)) throw DivergenceError(k);
    if (theta.norm() > cfg.escape_norm) {
      record(k);
      traj.escaped_at = k;
      break;
    }
    if (rec.due(k)) record(k);
  }
  return traj;
}

struct SdeConfig {
  double learning_rate = 0.01;  // δ, sets the diffusion scale √(δ/m)
  std::size_t batch_size = 1;   // m
  double t_end = 1.0;
  double dt = 0.01;
  std::uint64_t seed = 0;
  std::int64_t record_stride = 1;
  bool snapshots = false;
  std::size_t covariance_samples = 1000;  // only for models without a closed-form covariance
};

/// Euler–Maruyama for dX = −∇f(X)dt + √(δ/m)·σ(X)dW, σσᵀ = C(X).
/// Models with a closed-form covariance (quadratic) use it, evaluated once
/// since it is constant; others re-estimate σ(X) at every step.
inline Trajectory sde_run(const LossModel& model, const ParamVector& theta0, const SdeConfig& cfg) {
  detail::check_finite_start(model, theta0);
  if (!(cfg.dt > 0.0)) throw Error("engine", "sde_run: dt must be > 0");
  if (!(cfg.learning_rate > 0.0)) throw Error("engine", "sde_run: learning_rate must be > 0");
  if (cfg.dt > cfg.learning_rate) throw Error("engine", "sde_run: dt must not exceed learning_rate");
  if (cfg.batch_size < 1) throw Error("engine", "sde_run: batch_size must be >= 1");
  if (!(cfg.t_end > 0.0)) throw Error("engine", "sde_run: t_end must be > 0");
  if (cfg.record_stride < 1) throw Error("engine", "sde_run: record_stride must be >= 1");
  const auto steps = static_cast<std::int64_t>(std::llround(cfg.t_end / cfg.dt));

  const std::optional<SymMatrix> exact = model.exact_gradient_covariance(theta0);
  Matrix sigma;
  if (exact) sigma = sqrt_spd(*exact);
  const double diffusion = std::sqrt(cfg.learning_rate / static_cast<double>(cfg.batch_size) * cfg.dt);

  Rng rng(cfg.seed);
  Trajectory traj;
  detail::Recorder rec(traj, cfg.dt, cfg.record_stride, steps, model.param_dim(), cfg.snapshots);
  ParamVector x = theta0;
  ParamVector xi(model.param_dim());
  auto record = [&](std::int64_t k) {
    const double loss = model.loss(x);
    if (!std::isfinite(loss)) throw DivergenceError(k);
    rec.record(k, loss, model.full_grad(x).squaredNorm(), x);
  };
  record(0);
  std::uint64_t cov_draw = 0;
  for (std::int64_t k = 1; k <= steps; ++k) {
    if (!exact) sigma = sqrt_spd(gradient_covariance(model, x, cfg.covariance_samples, mix64(cfg.seed ^ ++cov_draw)));
    rng.fill_normal(xi);
    x += -cfg.dt * model.full_grad(x) + diffusion * (sigma * xi);
    if (detail::diverged(x)) throw DivergenceError(k);
    if (rec.due(k)) record(k);
  }
  return traj;
}

/// Classical RK4 on Ẋ = −∇f(X). Snapshots (with velocities −∇f) are kept at
/// every record when requested; fluctuation_trajectory needs them.
inline Trajectory gradient_flow(const LossModel& model, const ParamVector& theta0, double t_end, double dt,
                                std::int64_t record_stride = 1, bool snapshots = true) {
  detail::check_finite_start(model, theta0);
  if (!(dt > 0.0)) throw Error("engine", "gradient_flow: dt must be > 0");
  if (!(t_end >= 0.0)) throw Error("engine", "gradient_flow: t_end must be >= 0");
  if (record_stride < 1) throw Error("engine", "gradient_flow: record_stride must be >= 1");
  const auto steps = static_cast<std::int64_t>(std::llround(t_end / dt));

  Trajectory traj;
  detail::Recorder rec(traj, dt, record_stride, steps, model.param_dim(), snapshots);
  ParamVector x = theta0;
  ParamVector g = model.full_grad(x);
  auto record = [&](std::int64_t k) {
    const double loss = model.loss(x);
    if (!std::isfinite(loss) || !g.allFinite()) throw DivergenceError(k);
    rec.record(k, loss, g.squaredNorm(), x);
    rec.record_velocity(-g);
  };
  record(0);
  for (std::int64_t k = 1; k <= steps; ++k) {
    const ParamVector k1 = -g;
    const ParamVector k2 = -model.full_grad(x + 0.5 * dt * k1);
    const ParamVector k3 = -model.full_grad(x + 0.5 * dt * k2);
    const ParamVector k4 = -model.full_grad(x + dt * k3);
    x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    g = model.full_grad(x);
    if (rec.due(k)) record(k);
  }
  return traj;
}

/// Exactly discretized eigenbasis OU process dz = −Λz dt + √(δ/m)·Λ^{1/2}dW:
/// z_i ← e^{−λ_i dt}·z_i + η_i with Var η_i = (δ/2m)(1 − e^{−2λ_i dt}).
/// Records carry loss ½Σλ_i z_i² and squared gradient norm Σλ_i² z_i².
inline Trajectory ou_eigenbasis_run(const Eigen::VectorXd& lambda, double learning_rate, std::size_t batch_size,
                                    double t_end, double dt, std::uint64_t seed, std::int64_t record_stride = 1,
                                    bool snapshots = true, std::optional<Eigen::VectorXd> z0 = std::nullopt) {
  for (Eigen::Index i = 0; i < lambda.size(); ++i)
    if (!(lambda[i] > 0.0)) throw Error("engine", "ou_eigenbasis_run: eigenvalues must be positive");
  if (lambda.size() == 0) throw Error("engine", "ou_eigenbasis_run: empty spectrum");
  if (!(dt > 0.0) || !(t_end > 0.0)) throw Error("engine", "ou_eigenbasis_run: dt and t_end must be > 0");
  if (!(learning_rate >= 0.0) || batch_size < 1) throw Error("engine", "ou_eigenbasis_run: bad (δ, m)");
  if (record_stride < 1) throw Error("engine", "ou_eigenbasis_run: record_stride must be >= 1");
  const auto steps = static_cast<std::int64_t>(std::llround(t_end / dt));
  const double ratio = learning_rate / static_cast<double>(batch_size);
  const Eigen::Index p = lambda.size();

  const Eigen::ArrayXd decay = (-lambda.array() * dt).exp();
  const Eigen::ArrayXd noise_sd = (0.5 * ratio * (1.0 - (-2.0 * lambda.array() * dt).exp())).sqrt();

  Rng rng(seed);
  Trajectory traj;
  detail::Recorder rec(traj, dt, record_stride, steps, p, snapshots);
  Eigen::VectorXd z = z0 ? *z0 : Eigen::VectorXd::Zero(p);
  if (z.size() != p) throw Error("engine", "ou_eigenbasis_run: z0 has wrong dimension");
  Eigen::VectorXd xi(p);
  auto record = [&](std::int64_t k) {
    const Eigen::ArrayXd lz2 = lambda.array() * z.array().square();
    rec.record(k, 0.5 * lz2.sum(), (lambda.array() * lz2).sum(), z);
  };
  record(0);
  for (std::int64_t k = 1; k <= steps; ++k) {
    rng.fill_normal(xi);
    z = (decay * z.array() + noise_sd * xi.array()).matrix();
    if (rec.due(k)) record(k);
  }
  return traj;
}

namespace detail {

// Evaluates the flow at time t by cubic Hermite interpolation on its grid
// (linear when velocities are absent).
inline Eigen::VectorXd interpolate_flow(const Trajectory& flow, double t) {
  const auto& r = flow.records;
  std::size_t hi = static_cast<std::size_t>(
      std::lower_bound(r.begin(), r.end(), t, [](const TrajectoryRecord& a, double v) { return a.t < v; }) -
      r.begin());
  if (hi == 0) return flow.snapshot(0);
  if (hi >= r.size()) return flow.snapshot(r.size() - 1);
  const std::size_t lo = hi - 1;
  const double h = r[hi].t - r[lo].t;
  const double s = (t - r[lo].t) / h;
  if (s >= 1.0) return flow.snapshot(hi);
  if (flow.velocities.size() != flow.snapshots.size()) return (1 - s) * flow.snapshot(lo) + s * flow.snapshot(hi);
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s, h01 = -2 * s3 + 3 * s2, h11 = s3 - s2;
  return h00 * flow.snapshot(lo) + h10 * h * flow.velocity(lo) + h01 * flow.snapshot(hi) +
         h11 * h * flow.velocity(hi);
}

}  // namespace detail

/// v(t) = √(m/δ)·(x(t) − X(t)) at each SGD record time. Output snapshots hold
/// v; the loss column carries ‖v‖² and grad_norm_sq is zero.
inline Trajectory fluctuation_trajectory(const Trajectory& sgd, const Trajectory& flow, double learning_rate,
                                         std::size_t batch_size) {
  if (!sgd.has_snapshots()) throw Error("engine", "fluctuation_trajectory: SGD trajectory has no snapshots");
  if (!flow.has_snapshots()) throw Error("engine", "fluctuation_trajectory: flow trajectory has no snapshots");
  if (sgd.snapshot_dim != flow.snapshot_dim) throw Error("engine", "fluctuation_trajectory: dimension mismatch");
  if (!(learning_rate > 0.0) || batch_size < 1) throw Error("engine", "fluctuation_trajectory: bad (δ, m)");
  const double t0 = flow.records.front().t;
  const double t1 = flow.records.back().t;
  const double slack = 1e-9 * std::max(1.0, std::abs(t1));
  for (const auto& r : sgd.records)
    if (r.t < t0 - slack || r.t > t1 + slack)
      throw Error("engine", "fluctuation_trajectory: time-range mismatch (SGD t=" + std::to_string(r.t) +
                                " outside flow [" + std::to_string(t0) + ", " + std::to_string(t1) + "])");

  const double scale = std::sqrt(static_cast<double>(batch_size) / learning_rate);
  Trajectory out;
  out.step_size = sgd.step_size;
  out.record_stride = sgd.record_stride;
  out.snapshot_dim = sgd.snapshot_dim;
  out.records.reserve(sgd.records.size());
  out.snapshots.reserve(sgd.snapshots.size());
  for (std::size_t i = 0; i < sgd.records.size(); ++i) {
    const Eigen::VectorXd v = scale * (sgd.snapshot(i) - detail::interpolate_flow(flow, sgd.records[i].t));
    out.records.push_back({sgd.records[i].step, sgd.records[i].t, v.squaredNorm(), 0.0});
    out.snapshots.insert(out.snapshots.end(), v.data(), v.data() + v.size());
  }
  return out;
}

/// RK4 on Γ' = −H(t)Γ − ΓH(t) + Q(t) from Γ(0) = 0; the last step is
/// shortened to land on t_end.
inline SymMatrix integrate_fluctuation_covariance(const std::function<SymMatrix(double)>& hessian_along_flow,
                                                  const std::function<SymMatrix(double)>& cov_along_flow,
                                                  double t_end, double dt) {
  if (!(dt > 0.0)) throw Error("engine", "integrate_fluctuation_covariance: dt must be > 0");
  if (!(t_end >= 0.0)) throw Error("engine", "integrate_fluctuation_covariance: t_end must be >= 0");
  const Eigen::Index p = hessian_along_flow(0.0).dim();
  auto rhs = [&](double t, const Matrix& g) -> Matrix {
    const SymMatrix h = hessian_along_flow(t);
    return cov_along_flow(t).matrix() - h.matrix() * g - g * h.matrix();
  };
  Matrix g = Matrix::Zero(p, p);
  double t = 0.0;
  while (t < t_end) {
    const double h = std::min(dt, t_end - t);
    if (h <= 1e-15 * std::max(1.0, t_end)) break;
    const Matrix k1 = rhs(t, g);
    const Matrix k2 = rhs(t + 0.5 * h, g + 0.5 * h * k1);
    const Matrix k3 = rhs(t + 0.5 * h, g + 0.5 * h * k2);
    const Matrix k4 = rhs(t + h, g + h * k3);
    g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += h;
    if (!g.allFinite()) throw Error("engine", "integrate_fluctuation_covariance: non-finite covariance");
  }
  return SymMatrix::symmetrized(g);
}

/// Trajectory CSV: `step,t,loss,grad_norm_sq`.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  os << "step,t,loss,grad_norm_sq\n" << std::setprecision(17);
  for (const auto& r : traj.records) os << r.step << "," << r.t << "," << r.loss << "," << r.grad_norm_sq << "\n";
}

/// Snapshot CSV: `step,theta_0..theta_{p-1}`.
inline void write_snapshots_csv(std::ostream& os, const Trajectory& traj) {
  os << "step";
  for (Eigen::Index i = 0; i < traj.snapshot_dim; ++i) os << ",theta_" << i;
  os << "\n" << std::setprecision(17);
  if (!traj.has_snapshots()) return;
  for (std::size_t k = 0; k < traj.records.size(); ++k) {
    os << traj.records[k].step;
    const auto s = traj.snapshot(k);
    for (Eigen::Index i = 0; i < s.size(); ++i) os << "," << s[i];
    os << "\n";
  }
}

}  // namespace sgdscope
