#pragma once

// Orchestrated studies: the learning-rate/batch-size scan against the
// closed-form predictions, the linear-scaling curve comparison, the
// fluctuation CLT check and the saddle divergence check.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgdscope/engine.hpp"
#include "sgdscope/error.hpp"
#include "sgdscope/estimators.hpp"
#include "sgdscope/linalg.hpp"
#include "sgdscope/parallel.hpp"
#include "sgdscope/problems.hpp"
#include "sgdscope/rng.hpp"

namespace sgdscope {

struct LrBs {
  double learning_rate = 0.01;
  std::size_t batch_size = 1;
};

// ---------------------------------------------------------------------------
// Minimum localization

struct LocatedMinimum {
  ParamVector theta;
  double grad_norm = 0.0;
  bool located = false;
};

inline constexpr double kMinimumGradTol = 1e-6;

/// Uses the model's closed-form minimizer when it has one; otherwise follows
/// the gradient flow from `theta0` in chunks of `chunk_time` until
/// ‖∇L‖ < 1e-6 or `max_time` is reached.
inline LocatedMinimum locate_minimum(const LossModel& model, const ParamVector& theta0, double flow_dt = 0.1,
                                     double chunk_time = 50.0, double max_time = 20000.0) {
  if (auto known = model.known_minimizer()) return {*known, model.full_grad(*known).norm(), true};
  ParamVector x = theta0;
  double g = model.full_grad(x).norm();
  for (double t = 0.0; t < max_time && !(g < kMinimumGradTol); t += chunk_time) {
    const Trajectory flow = gradient_flow(model, x, chunk_time, flow_dt, std::numeric_limits<std::int64_t>::max(), true);
    x = flow.snapshot(flow.records.size() - 1);
    g = std::sqrt(flow.records.back().grad_norm_sq);
  }
  return {x, g, g < kMinimumGradTol};
}

// ---------------------------------------------------------------------------
// Scan over (δ, m)

struct ScanRow {
  std::size_t experiment_id = 0;
  std::size_t batch_size = 0;
  double learning_rate = 0.0;
  double bs_over_lr = 0.0;
  double tr_h = 0.0;
  double tr_sigma2 = 0.0;
  double tr_sigma2_h = 0.0;
  double excess_loss = 0.0;
  double grad_norm_sq = 0.0;
  bool minimum_located = false;
  // Absent when the minimum could not be located.
  std::optional<double> pred_j2018;
  std::optional<double> pred_w2019_loss;
  std::optional<double> pred_w2019_gradnorm;
  std::optional<double> magnitude_diff;
  std::size_t replicas = 0;
};

struct ScanOptions {
  std::int64_t steps = 100000;
  std::size_t replicas = 5;
  std::uint64_t master_seed = 0;
  double burn_in_fraction = 0.5;
  std::int64_t record_stride = 10;
  Sampling sampling = Sampling::with_replacement;
  std::size_t workers = 1;
  EstimatorOptions estimators{};
  double flow_dt = 0.1;
};

/// For each grid point runs `replicas` SGD runs started at the located
/// minimum and averages their stationary statistics. Replica seeds are
/// derive_seed(master, {grid_index, replica_index}); rows come out in grid
/// order and do not depend on the worker count.
inline std::vector<ScanRow> scan_bs_lr(const LossModel& model, const ParamVector& theta0,
                                       const std::vector<LrBs>& grid, const ScanOptions& opt) {
  if (opt.replicas < 1) throw Error("experiments", "scan_bs_lr: replicas must be >= 1");
  const LocatedMinimum minimum = locate_minimum(model, theta0, opt.flow_dt);
  const double base_loss = model.loss(minimum.theta);

  std::optional<PredictionReport> traces;
  if (minimum.located) {
    EstimatorOptions eo = opt.estimators;
    eo.seed = derive_seed(opt.master_seed, {0xE57u});
    traces = predict_at(model, minimum.theta, 1.0, 1.0, eo);
  }

  struct ReplicaResult {
    double excess = 0.0;
    double grad_norm_sq = 0.0;
  };
  const std::size_t jobs = grid.size() * opt.replicas;
  const auto results = parallel_map(jobs, opt.workers, [&](std::size_t job) {
    const std::size_t g = job / opt.replicas;
    const std::size_t r = job % opt.replicas;
    SgdConfig cfg;
    cfg.learning_rate = grid[g].learning_rate;
    cfg.batch_size = grid[g].batch_size;
    cfg.steps = opt.steps;
    cfg.seed = derive_seed(opt.master_seed, {g, r});
    cfg.sampling = opt.sampling;
    cfg.record_stride = opt.record_stride;
    const StationaryStats s = stationary_stats(sgd_run(model, minimum.theta, cfg), opt.burn_in_fraction);
    return ReplicaResult{s.mean_loss - base_loss, s.mean_grad_norm_sq};
  });

  std::vector<ScanRow> rows;
  rows.reserve(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    ScanRow row;
    row.experiment_id = g + 1;
    row.batch_size = grid[g].batch_size;
    row.learning_rate = grid[g].learning_rate;
    row.bs_over_lr = static_cast<double>(row.batch_size) / row.learning_rate;
    row.replicas = opt.replicas;
    for (std::size_t r = 0; r < opt.replicas; ++r) {
      row.excess_loss += results[g * opt.replicas + r].excess;
      row.grad_norm_sq += results[g * opt.replicas + r].grad_norm_sq;
    }
    row.excess_loss /= static_cast<double>(opt.replicas);
    row.grad_norm_sq /= static_cast<double>(opt.replicas);
    row.minimum_located = minimum.located;
    if (traces) {
      const double m = static_cast<double>(row.batch_size);
      row.tr_h = traces->tr_h;
      row.tr_sigma2 = traces->tr_sigma2;
      row.tr_sigma2_h = traces->tr_sigma2_h;
      row.pred_j2018 = predict_loss_j2018(row.learning_rate, m, row.tr_h);
      row.pred_w2019_loss = predict_excess_loss_w2019(row.learning_rate, m, row.tr_sigma2);
      row.pred_w2019_gradnorm = predict_gradnorm_w2019(row.learning_rate, m, std::max(0.0, row.tr_sigma2_h));
      if (row.tr_sigma2 > 0.0) row.magnitude_diff = magnitude_difference(row.tr_h, row.tr_sigma2);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace detail {
inline void write_opt(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}
}  // namespace detail

inline constexpr const char* kScanCsvHeader =
    "experiment_id,bs,lr,bs_over_lr,tr_h,tr_sigma2,tr_sigma2_h,excess_loss,grad_norm_sq,pred_j2018,"
    "pred_w2019_loss,pred_w2019_gradnorm,magnitude_diff,replicas";

/// Scan CSV; prediction cells are empty for rows whose minimum was not located.
inline void write_scan_csv(std::ostream& os, const std::vector<ScanRow>& rows) {
  os << kScanCsvHeader << "\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.experiment_id << "," << r.batch_size << "," << r.learning_rate << "," << r.bs_over_lr << "," << r.tr_h
       << "," << r.tr_sigma2 << "," << r.tr_sigma2_h << "," << r.excess_loss << "," << r.grad_norm_sq << ",";
    detail::write_opt(os, r.pred_j2018);
    os << ",";
    detail::write_opt(os, r.pred_w2019_loss);
    os << ",";
    detail::write_opt(os, r.pred_w2019_gradnorm);
    os << ",";
    detail::write_opt(os, r.magnitude_diff);
    os << "," << r.replicas << "\n";
  }
}

// ---------------------------------------------------------------------------
// Linear scaling: curves at equal and unequal m/δ

enum class RatioClass { base, same_ratio, near_ratio, far_ratio };

inline const char* to_string(RatioClass c) {
  switch (c) {
    case RatioClass::base: return "base";
    case RatioClass::same_ratio: return "same_ratio";
    case RatioClass::near_ratio: return "near_ratio";
    case RatioClass::far_ratio: return "far_ratio";
  }
  return "?";
}

struct Curve {
  std::string label;
  RatioClass ratio_class = RatioClass::base;
  LrBs config;
  std::vector<double> t;
  std::vector<double> loss;
  std::vector<double> accuracy;  // MLP only
  double divergence = 0.0;       // against the base curve
};

struct CurveSet {
  std::vector<Curve> curves;  // curves[0] is the base configuration
  std::optional<double> same_ratio;
  std::optional<double> near_ratio;
  std::optional<double> far_ratio;
};

struct ScalingOptions {
  double t_end = 100.0;      // common horizon in flow time t = k·δ
  double record_dt = 0.0;    // 0 → the largest δ among all configs
  double burn_in_fraction = 0.5;
  std::size_t replicas = 1;  // curves are replica means
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

namespace detail {

// Trailing moving average over `window` records.
inline std::vector<double> trailing_average(const std::vector<double>& x, std::size_t window) {
  std::vector<double> out(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= window) acc -= x[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

inline std::uint64_t config_seed(std::uint64_t seed, const LrBs& c) {
  return derive_seed(seed, {std::bit_cast<std::uint64_t>(c.learning_rate), c.batch_size});
}

}  // namespace detail

/// Time-averaged |difference| of two equally gridded curves after smoothing
/// each with a trailing window of 1% of the records, over records with
/// t ≥ burn_in·t_end.
inline double curve_divergence(const Curve& a, const Curve& b, double burn_in_fraction) {
  if (a.loss.size() != b.loss.size()) throw Error("experiments", "curve_divergence: curves on different grids");
  const std::size_t window = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.01 * a.loss.size())));
  const auto sa = detail::trailing_average(a.loss, window);
  const auto sb = detail::trailing_average(b.loss, window);
  const double cutoff = burn_in_fraction * a.t.back();
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (a.t[i] < cutoff) continue;
    acc += std::abs(sa[i] - sb[i]);
    ++count;
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

/// Runs SGD for the base (δ, m), every (cδ, cm), and every off-ratio config
/// from the same start, records loss on a common grid in t = k·δ, and scores
/// each curve by its divergence from the base curve. Off-ratio configs are
/// ranked by |log(ratio/base ratio)|, ties broken by the absolute gap in
/// δ/m (the noise temperature); the closer half, rounded up, is near_ratio
/// and the rest far_ratio. Each curve is the mean of `replicas` runs. Configs
/// identical to the base share its seeds and are excluded from the class
/// averages.
inline CurveSet linear_scaling_experiment(const LossModel& model, const ParamVector& theta0, const LrBs& base,
                                          const std::vector<double>& factors, const std::vector<LrBs>& off_ratio,
                                          const ScalingOptions& opt) {
  CurveSet set;
  set.curves.push_back({"base", RatioClass::base, base, {}, {}, {}, 0.0});
  for (double c : factors) {
    if (!(c > 0.0)) throw Error("experiments", "linear_scaling_experiment: factors must be > 0");
    const double m = c * static_cast<double>(base.batch_size);
    if (std::abs(m - std::round(m)) > 1e-9 || std::round(m) < 1.0)
      throw Error("experiments", "linear_scaling_experiment: factor " + std::to_string(c) +
                                     " does not give an integer batch size");
    LrBs cfg{c * base.learning_rate, static_cast<std::size_t>(std::llround(m))};
    std::ostringstream label;
    label << "x" << c;
    set.curves.push_back({label.str(), RatioClass::same_ratio, cfg, {}, {}, {}, 0.0});
  }
  const double base_ratio = static_cast<double>(base.batch_size) / base.learning_rate;
  std::vector<std::size_t> order(off_ratio.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto dist = [&](std::size_t i) {
    return std::abs(std::log(static_cast<double>(off_ratio[i].batch_size) / off_ratio[i].learning_rate / base_ratio));
  };
  auto temp_gap = [&](std::size_t i) {
    return std::abs(off_ratio[i].learning_rate / static_cast<double>(off_ratio[i].batch_size) -
                    base.learning_rate / static_cast<double>(base.batch_size));
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double da = dist(a), db = dist(b);
    if (std::abs(da - db) > 1e-12 * std::max(1.0, std::max(da, db))) return da < db;
    return temp_gap(a) < temp_gap(b);
  });
  const std::size_t near_count = (off_ratio.size() + 1) / 2;
  std::vector<RatioClass> off_class(off_ratio.size());
  for (std::size_t k = 0; k < order.size(); ++k)
    off_class[order[k]] = k < near_count ? RatioClass::near_ratio : RatioClass::far_ratio;
  for (std::size_t i = 0; i < off_ratio.size(); ++i) {
    std::ostringstream label;
    label << "lr" << off_ratio[i].learning_rate << "_bs" << off_ratio[i].batch_size;
    set.curves.push_back({label.str(), off_class[i], off_ratio[i], {}, {}, {}, 0.0});
  }

  double record_dt = opt.record_dt;
  if (record_dt <= 0.0)
    for (const auto& c : set.curves) record_dt = std::max(record_dt, c.config.learning_rate);
  if (!(opt.t_end >= record_dt)) throw Error("experiments", "linear_scaling_experiment: t_end shorter than record_dt");

  if (opt.replicas < 1) throw Error("experiments", "linear_scaling_experiment: replicas must be >= 1");
  const auto* mlp = dynamic_cast<const MlpModel*>(&model);
  const std::size_t reps = opt.replicas;
  const auto runs = parallel_map(set.curves.size() * reps, opt.workers, [&](std::size_t job) {
    const LrBs& c = set.curves[job / reps].config;
    const std::size_t r = job % reps;
    const double stride_real = record_dt / c.learning_rate;
    const auto stride = static_cast<std::int64_t>(std::llround(stride_real));
    const auto steps = static_cast<std::int64_t>(std::llround(opt.t_end / c.learning_rate));
    if (stride < 1 || std::abs(stride_real - static_cast<double>(stride)) > 1e-9 * stride_real ||
        std::abs(opt.t_end / c.learning_rate - static_cast<double>(steps)) > 1e-6)
      throw Error("experiments", "linear_scaling_experiment: record_dt and t_end must be multiples of lr " +
                                     std::to_string(c.learning_rate));
    SgdConfig cfg;
    cfg.learning_rate = c.learning_rate;
    cfg.batch_size = c.batch_size;
    cfg.steps = steps;
    cfg.seed = derive_seed(detail::config_seed(opt.seed, c), {r});
    cfg.record_stride = stride;
    cfg.snapshots = mlp != nullptr;
    const Trajectory traj = sgd_run(model, theta0, cfg);
    Curve out;
    for (std::size_t k = 0; k < traj.records.size(); ++k) {
      if (traj.records[k].step % stride != 0) continue;
      out.t.push_back(static_cast<double>(traj.records[k].step / stride) * record_dt);
      out.loss.push_back(traj.records[k].loss);
      if (mlp && traj.has_snapshots()) out.accuracy.push_back(mlp->accuracy(ParamVector(traj.snapshot(k))));
    }
    return out;
  });

  // Replica means, summed in replica order.
  for (std::size_t i = 0; i < set.curves.size(); ++i) {
    Curve& dst = set.curves[i];
    const Curve& first = runs[i * reps];
    dst.t = first.t;
    dst.loss.assign(first.loss.size(), 0.0);
    dst.accuracy.assign(first.accuracy.size(), 0.0);
    for (std::size_t r = 0; r < reps; ++r) {
      const Curve& src = runs[i * reps + r];
      for (std::size_t k = 0; k < dst.loss.size(); ++k) dst.loss[k] += src.loss[k];
      for (std::size_t k = 0; k < dst.accuracy.size(); ++k) dst.accuracy[k] += src.accuracy[k];
    }
    for (double& v : dst.loss) v /= static_cast<double>(reps);
    for (double& v : dst.accuracy) v /= static_cast<double>(reps);
  }
  auto average = [&](RatioClass cls) -> std::optional<double> {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 1; i < set.curves.size(); ++i) {
      const auto& c = set.curves[i];
      if (c.ratio_class != cls) continue;
      if (c.config.learning_rate == base.learning_rate && c.config.batch_size == base.batch_size) continue;
      acc += c.divergence;
      ++n;
    }
    return n ? std::optional<double>(acc / static_cast<double>(n)) : std::nullopt;
  };
  for (std::size_t i = 1; i < set.curves.size(); ++i)
    set.curves[i].divergence = curve_divergence(set.curves[0], set.curves[i], opt.burn_in_fraction);
  set.same_ratio = average(RatioClass::same_ratio);
  set.near_ratio = average(RatioClass::near_ratio);
  set.far_ratio = average(RatioClass::far_ratio);
  return set;
}

/// Curves CSV: `config_label,ratio_class,step,t,loss[,accuracy]`, where step
/// indexes the common record grid.
inline void write_curves_csv(std::ostream& os, const CurveSet& set) {
  const bool acc = !set.curves.empty() && !set.curves[0].accuracy.empty();
  os << "config_label,ratio_class,step,t,loss" << (acc ? ",accuracy" : "") << "\n" << std::setprecision(17);
  for (const auto& c : set.curves) {
    for (std::size_t k = 0; k < c.loss.size(); ++k) {
      os << c.label << "," << to_string(c.ratio_class) << "," << k << "," << c.t[k] << "," << c.loss[k];
      if (acc) os << "," << c.accuracy[k];
      os << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Fluctuation CLT

struct CltRow {
  double learning_rate = 0.0;
  std::int64_t steps = 0;
  SymMatrix replica_cov;  // about the replica mean
  Eigen::VectorXd mean_v;
  double rel_error = 0.0;    // ‖cov − Γ(T)‖_F / ‖Γ(T)‖_F (absolute when Γ(T) = 0)
  double noise_level = 0.0;  // expected relative error from replica sampling alone
};

struct CltReport {
  std::size_t batch_size = 0;
  double t_end = 0.0;
  std::size_t replicas = 0;
  SymMatrix predicted_cov;
  std::vector<CltRow> rows;
  bool non_increasing = true;      // consecutive errors, 2× noise allowance
  bool smallest_le_largest = true;  // error at the smallest δ vs the largest, 2× noise allowance
};

struct CltOptions {
  std::size_t replicas = 2000;
  std::uint64_t seed = 0;
  double flow_dt = 1e-3;
  std::size_t workers = 1;
};

/// For each δ, runs `replicas` SGD paths from θ₀ to time T and compares the
/// replica covariance of v(T) = √(m/δ)(x(T) − X(T)) with the covariance ODE
/// solution Γ(T) for the constant Hessian and gradient covariance of the
/// quadratic model.
inline CltReport clt_experiment(const QuadraticModel& model, const ParamVector& theta0,
                                const std::vector<double>& learning_rates, std::size_t batch_size, double t_end,
                                const CltOptions& opt) {
  if (opt.replicas < 100) throw Error("experiments", "clt_experiment: insufficient replicas (< 100)");
  if (learning_rates.empty()) throw Error("experiments", "clt_experiment: empty learning-rate list");
  for (std::size_t i = 1; i < learning_rates.size(); ++i)
    if (!(learning_rates[i] < learning_rates[i - 1]))
      throw Error("experiments", "clt_experiment: learning rates must be strictly descending");
  if (!(t_end > 0.0)) throw Error("experiments", "clt_experiment: T must be > 0");

  CltReport rep;
  rep.batch_size = batch_size;
  rep.t_end = t_end;
  rep.replicas = opt.replicas;
  const SymMatrix h = model.hessian();
  const SymMatrix c = model.noise_cov();
  rep.predicted_cov =
      integrate_fluctuation_covariance([&](double) { return h; }, [&](double) { return c; }, t_end, opt.flow_dt);
  const double pred_norm = rep.predicted_cov.matrix().norm();
  const double pred_tr = trace(rep.predicted_cov);
  const Trajectory flow = gradient_flow(model, theta0, t_end, opt.flow_dt, 1, true);
  const Eigen::Index p = model.param_dim();

  for (std::size_t li = 0; li < learning_rates.size(); ++li) {
    const double lr = learning_rates[li];
    const auto steps = static_cast<std::int64_t>(std::llround(t_end / lr));
    if (steps < 1 || std::abs(static_cast<double>(steps) * lr - t_end) > 1e-9 * t_end)
      throw Error("experiments", "clt_experiment: T must be a multiple of lr " + std::to_string(lr));
    const auto vs = parallel_map(opt.replicas, opt.workers, [&](std::size_t r) {
      SgdConfig cfg;
      cfg.learning_rate = lr;
      cfg.batch_size = batch_size;
      cfg.steps = steps;
      cfg.seed = derive_seed(opt.seed, {li, r});
      cfg.record_stride = steps;
      cfg.snapshots = true;
      const Trajectory v = fluctuation_trajectory(sgd_run(model, theta0, cfg), flow, lr, batch_size);
      return Eigen::VectorXd(v.snapshot(v.records.size() - 1));
    });
    CltRow row;
    row.learning_rate = lr;
    row.steps = steps;
    row.mean_v = Eigen::VectorXd::Zero(p);
    for (const auto& v : vs) row.mean_v += v;
    row.mean_v /= static_cast<double>(vs.size());
    Matrix cov = Matrix::Zero(p, p);
    for (const auto& v : vs) cov += (v - row.mean_v) * (v - row.mean_v).transpose();
    row.replica_cov = SymMatrix::symmetrized(cov / static_cast<double>(vs.size()));
    const double diff = (row.replica_cov.matrix() - rep.predicted_cov.matrix()).norm();
    const double n = static_cast<double>(opt.replicas);
    if (pred_norm > 0.0) {
      row.rel_error = diff / pred_norm;
      // Gaussian sampling: E‖Ŝ − Γ‖²_F = (‖Γ‖²_F + (tr Γ)²)/N.
      row.noise_level = std::sqrt((pred_norm * pred_norm + pred_tr * pred_tr) / n) / pred_norm;
    } else {
      row.rel_error = diff;
      row.noise_level = 0.0;
    }
    rep.rows.push_back(std::move(row));
  }
  for (std::size_t i = 1; i < rep.rows.size(); ++i)
    if (rep.rows[i].rel_error > rep.rows[i - 1].rel_error + 2.0 * rep.rows[i].noise_level) rep.non_increasing = false;
  rep.smallest_le_largest =
      rep.rows.back().rel_error <= rep.rows.front().rel_error + 2.0 * rep.rows.back().noise_level;
  return rep;
}

// ---------------------------------------------------------------------------
// Saddle divergence

enum class Verdict { diverged, stable };

inline const char* to_string(Verdict v) { return v == Verdict::diverged ? "DIVERGED" : "STABLE"; }

struct SaddleReport {
  Verdict verdict = Verdict::stable;
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
  double negative_eigenvalue = 0.0;
  double expected_rate = 0.0;  // δ·|λ_neg| per step
  double median_final_norm = 0.0;
  double median_rate = 0.0;
  std::vector<double> final_norms;
  std::vector<double> rates;  // per replica; 0 when too few points to fit
  std::vector<std::int64_t> escape_steps;  // -1 when the replica stayed inside the ball
};

struct SaddleOptions {
  std::int64_t steps = 10000;
  std::size_t replicas = 20;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

inline constexpr double kSaddleEscapeNorm = 1e6;
inline constexpr double kSaddleRateTolerance = 0.3;

namespace detail {
inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Least-squares slope of y against x.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}
}  // namespace detail

/// Runs Gaussian-noise SGD replicas started exactly at the saddle θ = 0 of
/// the quadratic with indefinite H. The growth rate per replica is the
/// least-squares slope of log|uᵀθ_k| against k along the most negative
/// eigendirection u, fitted where the projection exceeds 10³ times the
/// per-step noise scale. DIVERGED requires the median final norm to exceed
/// 10⁶ and the median rate to be within 30% of δ·|λ_neg|.
inline SaddleReport saddle_divergence_experiment(const SymMatrix& h_indefinite, const SymMatrix& c,
                                                 double learning_rate, std::size_t batch_size,
                                                 const SaddleOptions& opt) {
  const EigenDecomposition e = sym_eigendecompose(h_indefinite, "Hessian");
  if (!(e.eigenvalues[0] < 0.0))
    throw Error("experiments", "saddle_divergence_experiment: configuration error, Hessian has no negative eigenvalue");
  if (opt.replicas < 1) throw Error("experiments", "saddle_divergence_experiment: replicas must be >= 1");
  const Eigen::Index p = h_indefinite.dim();
  const QuadraticModel model = make_quadratic(h_indefinite, ParamVector::Zero(p), c, true);
  const Eigen::VectorXd u = e.eigenvectors.col(0);

  SaddleReport rep;
  rep.learning_rate = learning_rate;
  rep.batch_size = batch_size;
  rep.negative_eigenvalue = e.eigenvalues[0];
  rep.expected_rate = learning_rate * std::abs(e.eigenvalues[0]);

  const EigenDecomposition ce = sym_eigendecompose(c, "noise covariance");
  const double noise_step = learning_rate / std::sqrt(static_cast<double>(batch_size)) *
                            std::sqrt(std::max(0.0, ce.eigenvalues[ce.eigenvalues.size() - 1]));
  const double fit_floor = std::max(1e3 * noise_step, 1e-300);

  struct ReplicaOut {
    double final_norm = 0.0;
    double rate = 0.0;
    std::int64_t escape = -1;
  };
  const auto outs = parallel_map(opt.replicas, opt.workers, [&](std::size_t r) {
    SgdConfig cfg;
    cfg.learning_rate = learning_rate;
    cfg.batch_size = batch_size;
    cfg.steps = opt.steps;
    cfg.seed = derive_seed(opt.seed, {r});
    cfg.snapshots = true;
    cfg.escape_norm = kSaddleEscapeNorm;
    const Trajectory traj = gaussian_sgd_run(model, ParamVector::Zero(p), cfg);
    ReplicaOut out;
    out.final_norm = traj.snapshot(traj.records.size() - 1).norm();
    out.escape = traj.escaped_at.value_or(-1);
    std::vector<double> ks, ys;
    for (std::size_t i = 0; i < traj.records.size(); ++i) {
      const double proj = std::abs(u.dot(traj.snapshot(i)));
      if (proj >= fit_floor) {
        ks.push_back(static_cast<double>(traj.records[i].step));
        ys.push_back(std::log(proj));
      }
    }
    if (ks.size() >= 3) out.rate = detail::ls_slope(ks, ys);
    return out;
  });

  for (const auto& o : outs) {
    rep.final_norms.push_back(o.final_norm);
    rep.rates.push_back(o.rate);
    rep.escape_steps.push_back(o.escape);
  }
  rep.median_final_norm = detail::median(rep.final_norms);
  rep.median_rate = detail::median(rep.rates);
  const bool escaped = rep.median_final_norm > kSaddleEscapeNorm;
  const bool rate_ok = rep.median_rate > 0.0 &&
                       std::abs(rep.median_rate - rep.expected_rate) <= kSaddleRateTolerance * rep.expected_rate;
  rep.verdict = escaped && rate_ok ? Verdict::diverged : Verdict::stable;
  return rep;
}

}  // namespace sgdscope
