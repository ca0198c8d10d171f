#pragma once

// Trace estimators, stationary averages and the closed-form expected-loss
// predictions for SGD near a minimum.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>

#include <Eigen/Dense>

#include "sgdscope/engine.hpp"
#include "sgdscope/error.hpp"
#include "sgdscope/linalg.hpp"
#include "sgdscope/problems.hpp"
#include "sgdscope/rng.hpp"

namespace sgdscope {

struct TraceEstimate {
  double estimate = 0.0;
  double stderr_ = 0.0;
};

/// Hutchinson estimate of Tr(H): mean of vᵀ·H·v over Rademacher probes v.
inline TraceEstimate hutchinson_trace(const LossModel& model, const ParamVector& theta, std::size_t probe_count,
                                      std::uint64_t seed) {
  if (probe_count < 2) throw Error("estimators", "hutchinson_trace: probe_count must be >= 2");
  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 0; k < probe_count; ++k) {
    const Eigen::VectorXd v = rng.rademacher_vector(model.param_dim());
    const double x = v.dot(model.hvp(theta, v));
    const double delta = x - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (x - mean);
  }
  const double var = m2 / static_cast<double>(probe_count - 1);
  return {mean, std::sqrt(var / static_cast<double>(probe_count))};
}

/// tr σ² = (1/N)Σ‖g_j − ḡ‖² without forming the p×p covariance. Draws the
/// same per-example gradients, in the same order, as gradient_covariance with
/// the same seed.
inline double grad_cov_trace(const LossModel& model, const ParamVector& theta, std::size_t sample_count,
                             std::uint64_t seed = 0) {
  const std::size_t n = model.synthesized_noise() ? sample_count : model.example_count();
  if (n < 2) throw Error("estimators", "grad_cov_trace: fewer than 2 gradient samples");
  Rng rng(seed);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(model.param_dim());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(model.param_dim());
  for (std::size_t j = 0; j < n; ++j) {
    const Eigen::VectorXd g = model.per_example_grad(theta, j, &rng);
    const Eigen::VectorXd delta = g - mean;
    mean += delta / static_cast<double>(j + 1);
    m2 += delta.cwiseProduct(g - mean);
  }
  return m2.sum() / static_cast<double>(n);
}

/// Randomized tr(σ²·H): mean over probe gradients of (g_j − ḡ)ᵀ·H·(g_j − ḡ).
/// Finite-data models probe `probe_count` uniformly drawn examples against
/// the full-data mean; synthesized-noise models draw `probe_count` fresh
/// gradients around the exact mean ∇L(θ).
inline double trace_sigma2_h_sampled(const LossModel& model, const ParamVector& theta, std::size_t probe_count,
                                     std::uint64_t seed) {
  if (probe_count < 2) throw Error("estimators", "trace_sigma2_h: probe_count must be >= 2");
  Rng rng(seed);
  const Eigen::VectorXd mean = model.full_grad(theta);
  const std::size_t n = model.example_count();
  double acc = 0.0;
  for (std::size_t k = 0; k < probe_count; ++k) {
    const std::size_t j = n > 0 ? rng.index(n) : k;
    const Eigen::VectorXd d = model.per_example_grad(theta, j, &rng) - mean;
    acc += d.dot(model.hvp(theta, d));
  }
  return acc / static_cast<double>(probe_count);
}

/// tr(σ²·H). For p within the dense guard this is trace(C·H) with H from
/// hessian_dense and C the model's closed-form covariance when it has one,
/// else gradient_covariance over `sample_count` draws. Larger models use
/// trace_sigma2_h_sampled.
inline double trace_sigma2_h(const LossModel& model, const ParamVector& theta, std::size_t probe_count,
                             std::uint64_t seed, std::size_t sample_count = 100000) {
  if (model.param_dim() > kDenseGuard) {
    return trace_sigma2_h_sampled(model, theta, probe_count, seed);
  }
  const SymMatrix h = hessian_dense(model, theta);
  const std::optional<SymMatrix> exact = model.exact_gradient_covariance(theta);
  const SymMatrix c = exact ? *exact : gradient_covariance(model, theta, sample_count, seed);
  return (c.matrix().cwiseProduct(h.matrix())).sum();
}

struct StationaryStats {
  double mean_loss = 0.0;
  double mean_grad_norm_sq = 0.0;
  std::size_t sample_count = 0;
  double burn_in_fraction = 0.0;
  std::optional<SymMatrix> empirical_param_cov;
};

/// Averages over records with step >= burn_in_fraction · last step. The
/// empirical covariance (population form, about the window mean) is filled
/// when the trajectory carries snapshots.
inline StationaryStats stationary_stats(const Trajectory& traj, double burn_in_fraction = 0.5) {
  if (traj.records.empty()) throw Error("estimators", "stationary_stats: empty trajectory");
  if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0))
    throw Error("estimators", "stationary_stats: burn_in_fraction must be in [0, 1)");
  const double cutoff = burn_in_fraction * static_cast<double>(traj.records.back().step);
  StationaryStats s;
  s.burn_in_fraction = burn_in_fraction;
  const bool snaps = traj.has_snapshots();
  const Eigen::Index p = traj.snapshot_dim;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(snaps ? p : 0);
  Matrix m2 = Matrix::Zero(snaps ? p : 0, snaps ? p : 0);
  for (std::size_t i = 0; i < traj.records.size(); ++i) {
    const auto& r = traj.records[i];
    if (static_cast<double>(r.step) < cutoff) continue;
    ++s.sample_count;
    s.mean_loss += r.loss;
    s.mean_grad_norm_sq += r.grad_norm_sq;
    if (snaps) {
      const Eigen::VectorXd x = traj.snapshot(i);
      const Eigen::VectorXd delta = x - mean;
      mean += delta / static_cast<double>(s.sample_count);
      m2 += delta * (x - mean).transpose();
    }
  }
  if (s.sample_count == 0) throw Error("estimators", "stationary_stats: no records after burn-in");
  s.mean_loss /= static_cast<double>(s.sample_count);
  s.mean_grad_norm_sq /= static_cast<double>(s.sample_count);
  if (snaps) s.empirical_param_cov = SymMatrix::symmetrized(m2 / static_cast<double>(s.sample_count));
  return s;
}

namespace detail {
inline void check_lr_bs(const char* fn, double learning_rate, double batch_size, double tr) {
  if (!(learning_rate > 0.0)) throw Error("estimators", std::string(fn) + ": learning_rate must be > 0");
  if (!(batch_size >= 1.0)) throw Error("estimators", std::string(fn) + ": batch_size must be >= 1");
  if (!(tr >= 0.0)) throw Error("estimators", std::string(fn) + ": trace must be >= 0");
}
}  // namespace detail

/// E[L] = δ·Tr(H)/(4m), the stationary loss of the C = H special case.
inline double predict_loss_j2018(double learning_rate, double batch_size, double tr_h) {
  detail::check_lr_bs("predict_loss_j2018", learning_rate, batch_size, tr_h);
  return learning_rate * tr_h / (4.0 * batch_size);
}

/// Excess loss δ·tr(σ²)/(4m) over the flow value at a minimum.
inline double predict_excess_loss_w2019(double learning_rate, double batch_size, double tr_sigma2) {
  detail::check_lr_bs("predict_excess_loss_w2019", learning_rate, batch_size, tr_sigma2);
  return learning_rate * tr_sigma2 / (4.0 * batch_size);
}

/// Excess squared gradient norm δ·tr(σ²H)/(2m).
inline double predict_gradnorm_w2019(double learning_rate, double batch_size, double tr_sigma2_h) {
  detail::check_lr_bs("predict_gradnorm_w2019", learning_rate, batch_size, tr_sigma2_h);
  return learning_rate * tr_sigma2_h / (2.0 * batch_size);
}

inline double magnitude_difference(double tr_h, double tr_sigma2) {
  if (!(tr_sigma2 > 0.0)) throw Error("estimators", "magnitude_difference: undefined ratio, tr_sigma2 <= 0");
  return tr_h / tr_sigma2;
}

struct PredictionReport {
  double learning_rate = 0.0;
  double batch_size = 0.0;
  double tr_h = 0.0;
  double tr_sigma2 = 0.0;
  double tr_sigma2_h = 0.0;
  double pred_loss_j2018 = 0.0;
  double pred_excess_loss_w2019 = 0.0;
  double pred_gradnorm_w2019 = 0.0;
  std::optional<double> magnitude_difference;
};

struct EstimatorOptions {
  std::size_t probe_count = 1000;
  std::size_t sample_count = 100000;
  std::uint64_t seed = 0;
};

/// All traces and predictions at θ. Tr(H) is exact (dense) within the guard
/// and Hutchinson beyond it; tr σ² uses the closed-form covariance when the
/// model has one.
inline PredictionReport predict_at(const LossModel& model, const ParamVector& theta, double learning_rate,
                                   double batch_size, const EstimatorOptions& opt = {}) {
  PredictionReport r;
  r.learning_rate = learning_rate;
  r.batch_size = batch_size;
  const std::uint64_t s_h = derive_seed(opt.seed, {1});
  const std::uint64_t s_c = derive_seed(opt.seed, {2});
  const std::uint64_t s_ch = derive_seed(opt.seed, {3});
  r.tr_h = model.param_dim() <= kDenseGuard ? trace(hessian_dense(model, theta))
                                            : hutchinson_trace(model, theta, opt.probe_count, s_h).estimate;
  const std::optional<SymMatrix> exact = model.exact_gradient_covariance(theta);
  r.tr_sigma2 = exact ? trace(*exact) : grad_cov_trace(model, theta, opt.sample_count, s_c);
  r.tr_sigma2_h = trace_sigma2_h(model, theta, opt.probe_count, s_ch, opt.sample_count);
  r.pred_loss_j2018 = predict_loss_j2018(learning_rate, batch_size, r.tr_h);
  r.pred_excess_loss_w2019 = predict_excess_loss_w2019(learning_rate, batch_size, r.tr_sigma2);
  r.pred_gradnorm_w2019 = predict_gradnorm_w2019(learning_rate, batch_size, std::max(0.0, r.tr_sigma2_h));
  if (r.tr_sigma2 > 0.0) r.magnitude_difference = magnitude_difference(r.tr_h, r.tr_sigma2);
  return r;
}

inline void write_report_text(std::ostream& os, const PredictionReport& r) {
  os << std::setprecision(10);
  os << "learning rate (lr)           " << r.learning_rate << "\n"
     << "batch size (bs)              " << r.batch_size << "\n"
     << "Tr(H)                        " << r.tr_h << "\n"
     << "tr(sigma^2)                  " << r.tr_sigma2 << "\n"
     << "tr(sigma^2 H)                " << r.tr_sigma2_h << "\n"
     << "E[L] from Tr(H)              " << r.pred_loss_j2018 << "\n"
     << "excess E[L] from tr(sigma^2) " << r.pred_excess_loss_w2019 << "\n"
     << "excess E|grad|^2             " << r.pred_gradnorm_w2019 << "\n"
     << "magnitude difference         ";
  if (r.magnitude_difference)
    os << *r.magnitude_difference << "\n";
  else
    os << "undefined\n";
}

}  // namespace sgdscope
