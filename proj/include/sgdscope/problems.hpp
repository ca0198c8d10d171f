#pragma once

// Loss models: the quantities SGD dynamics depend on (per-example and full
// gradients, Hessian-vector products, gradient covariance) behind one
// interface, plus the synthetic datasets the finite-data models train on.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgdscope/error.hpp"
#include "sgdscope/linalg.hpp"
#include "sgdscope/rng.hpp"

namespace sgdscope {

using ParamVector = Eigen::VectorXd;

/// Differentiable empirical risk L(θ) = (1/n) Σ_j ℓ(θ; u_j).
///
/// Finite-data models (logistic, MLP) index real examples. Synthesized-noise
/// models (quadratic) have no dataset: a "per-example" gradient is the full
/// gradient plus a fresh draw of gradient noise, so they need an Rng and
/// report example_count() == 0.
class LossModel {
 public:
  virtual ~LossModel() = default;

  virtual Eigen::Index param_dim() const = 0;
  virtual std::size_t example_count() const = 0;
  bool synthesized_noise() const { return example_count() == 0; }

  virtual double loss(const ParamVector& theta) const = 0;
  virtual std::optional<double> risk_minimum() const { return std::nullopt; }

  virtual ParamVector per_example_grad(const ParamVector& theta, std::size_t j, Rng* rng) const = 0;
  virtual ParamVector full_grad(const ParamVector& theta) const = 0;
  virtual ParamVector hvp(const ParamVector& theta, const ParamVector& v) const = 0;

  /// Mean of per-example gradients over `indices`. Callers go through the
  /// free function `minibatch_grad`, which validates the indices.
  virtual ParamVector minibatch_grad_unchecked(const ParamVector& theta, std::span<const std::size_t> indices,
                                               Rng& rng) const {
    ParamVector g = ParamVector::Zero(param_dim());
    for (std::size_t j : indices) g += per_example_grad(theta, j, &rng);
    return g / static_cast<double>(indices.size());
  }

  /// Closed-form gradient covariance when the model carries one.
  virtual std::optional<SymMatrix> exact_gradient_covariance(const ParamVector&) const { return std::nullopt; }

  /// Known minimizer, when the model has one in closed form.
  virtual std::optional<ParamVector> known_minimizer() const { return std::nullopt; }

  virtual std::string name() const = 0;
};

inline ParamVector minibatch_grad(const LossModel& model, const ParamVector& theta,
                                  std::span<const std::size_t> indices, Rng& rng) {
  if (indices.empty()) throw Error("problems", "minibatch_grad: empty index list");
  const std::size_t n = model.example_count();
  if (n > 0) {
    for (std::size_t j : indices)
      if (j >= n)
        throw Error("problems", "minibatch_grad: index " + std::to_string(j) + " out of range [0, " +
                                    std::to_string(n) + ")");
  }
  return model.minibatch_grad_unchecked(theta, indices, rng);
}

// ---------------------------------------------------------------------------
// Quadratic bowl

/// L(θ) = ½(θ−θ*)ᵀH(θ−θ*) with synthesized gradient noise of covariance C.
///
/// The ½ makes ∇L = H(θ−θ*) exactly. A per-example gradient is
/// H(θ−θ*) + R·ε with R·Rᵀ = C and ε standard normal.
class QuadraticModel final : public LossModel {
 public:
  QuadraticModel(SymMatrix hessian, ParamVector minimizer, SymMatrix noise_cov)
      : hessian_(std::move(hessian)), minimizer_(std::move(minimizer)), noise_cov_(std::move(noise_cov)) {
    noise_sqrt_ = sqrt_spd(noise_cov_);
    noise_free_ = noise_sqrt_.isZero(0.0);
  }

  Eigen::Index param_dim() const override { return hessian_.dim(); }
  std::size_t example_count() const override { return 0; }

  double loss(const ParamVector& theta) const override {
    const ParamVector d = theta - minimizer_;
    return 0.5 * d.dot(hessian_.matrix() * d);
  }
  std::optional<double> risk_minimum() const override { return 0.0; }

  ParamVector full_grad(const ParamVector& theta) const override { return hessian_.matrix() * (theta - minimizer_); }

  ParamVector per_example_grad(const ParamVector& theta, std::size_t, Rng* rng) const override {
    if (rng == nullptr) throw Error("problems", "quadratic per_example_grad needs a random stream");
    ParamVector g = full_grad(theta);
    if (!noise_free_) g += noise_sqrt_ * rng->normal_vector(param_dim());
    return g;
  }

  ParamVector minibatch_grad_unchecked(const ParamVector& theta, std::span<const std::size_t> indices,
                                       Rng& rng) const override {
    ParamVector g = full_grad(theta);
    if (noise_free_) return g;
    ParamVector eps_sum = ParamVector::Zero(param_dim());
    ParamVector eps(param_dim());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      rng.fill_normal(eps);
      eps_sum += eps;
    }
    g += noise_sqrt_ * (eps_sum / static_cast<double>(indices.size()));
    return g;
  }

  ParamVector hvp(const ParamVector&, const ParamVector& v) const override { return hessian_.matrix() * v; }

  std::optional<SymMatrix> exact_gradient_covariance(const ParamVector&) const override { return noise_cov_; }
  std::optional<ParamVector> known_minimizer() const override { return minimizer_; }

  std::string name() const override { return "quadratic"; }

  const SymMatrix& hessian() const { return hessian_; }
  const ParamVector& minimizer() const { return minimizer_; }
  const SymMatrix& noise_cov() const { return noise_cov_; }
  const Matrix& noise_sqrt() const { return noise_sqrt_; }
  bool noise_free() const { return noise_free_; }

 private:
  SymMatrix hessian_;
  ParamVector minimizer_;
  SymMatrix noise_cov_;
  Matrix noise_sqrt_;
  bool noise_free_ = false;
};

/// Builds a quadratic bowl. H must be positive definite and C PSD.
/// `allow_indefinite` admits saddle Hessians for the divergence experiment.
inline QuadraticModel make_quadratic(const SymMatrix& h, const ParamVector& minimizer, const SymMatrix& c,
                                     bool allow_indefinite = false) {
  if (h.dim() != minimizer.size() || h.dim() != c.dim()) {
    throw Error("problems", "make_quadratic: dimension mismatch (H " + std::to_string(h.dim()) + ", theta* " +
                                std::to_string(minimizer.size()) + ", C " + std::to_string(c.dim()) + ")");
  }
  if (!allow_indefinite) {
    const EigenDecomposition e = sym_eigendecompose(h, "Hessian");
    if (!(e.eigenvalues[0] > 1e-12 * spectral_norm(e))) {
      throw NotPositiveDefiniteError(
          "make_quadratic: Hessian not positive definite (min eigenvalue " + std::to_string(e.eigenvalues[0]) + ")",
          e.eigenvalues[0]);
    }
  }
  return QuadraticModel(h, minimizer, c);
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Matrix features;          // n x d
  std::vector<int> labels;  // n

  std::size_t size() const { return labels.size(); }
  Eigen::Index dim() const { return features.cols(); }
};

/// Isotropic Gaussian class blobs. Class k's center is drawn N(0, separation²·I);
/// examples are assigned round-robin to classes and sampled N(center, I).
inline Dataset generate_blobs(std::size_t n, Eigen::Index d, int classes, std::uint64_t seed,
                              double separation = 2.0) {
  if (n == 0 || d < 1 || classes < 1) throw Error("problems", "generate_blobs: n, d and classes must be positive");
  Rng rng(seed);
  Matrix centers(classes, d);
  for (int k = 0; k < classes; ++k) centers.row(k) = separation * rng.normal_vector(d).transpose();
  Dataset ds{Matrix(static_cast<Eigen::Index>(n), d), std::vector<int>(n)};
  for (std::size_t j = 0; j < n; ++j) {
    const int k = static_cast<int>(j % static_cast<std::size_t>(classes));
    ds.labels[j] = k;
    ds.features.row(static_cast<Eigen::Index>(j)) = centers.row(k) + rng.normal_vector(d).transpose();
  }
  return ds;
}

/// CSV with header `label,f0,...,f{d-1}`.
inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  os << "label";
  for (Eigen::Index i = 0; i < ds.dim(); ++i) os << ",f" << i;
  os << "\n" << std::setprecision(17);
  for (std::size_t j = 0; j < ds.size(); ++j) {
    os << ds.labels[j];
    for (Eigen::Index i = 0; i < ds.dim(); ++i) os << "," << ds.features(static_cast<Eigen::Index>(j), i);
    os << "\n";
  }
}

inline Dataset read_dataset_csv(std::istream& is, const std::string& source = "dataset") {
  std::string line;
  if (!std::getline(is, line)) throw Error("problems", source + ": empty dataset file");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t width = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      try {
        if (first) {
          labels.push_back(std::stoi(cell));
          first = false;
        } else {
          row.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw Error("problems", source + ": bad cell '" + cell + "'");
      }
    }
    if (rows.empty()) width = row.size();
    if (row.size() != width || width == 0) throw Error("problems", source + ": inconsistent feature count");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("problems", source + ": no examples");
  Dataset ds{Matrix(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width)), std::move(labels)};
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < width; ++i)
      ds.features(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = rows[j][i];
  return ds;
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace detail {
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
}  // namespace detail

/// ℓ(θ;(x,y)) = log(1+exp(xᵀθ)) − y·xᵀθ + (l2/2)‖θ‖², labels in {0,1}.
class LogisticModel final : public LossModel {
 public:
  LogisticModel(Matrix features, Eigen::VectorXd labels, double l2_penalty)
      : x_(std::move(features)), y_(std::move(labels)), l2_(l2_penalty) {}

  Eigen::Index param_dim() const override { return x_.cols(); }
  std::size_t example_count() const override { return static_cast<std::size_t>(x_.rows()); }

  double loss(const ParamVector& theta) const override {
    const Eigen::VectorXd z = x_ * theta;
    double s = 0.0;
    for (Eigen::Index j = 0; j < z.size(); ++j) s += detail::softplus(z[j]) - y_[j] * z[j];
    return s / static_cast<double>(z.size()) + 0.5 * l2_ * theta.squaredNorm();
  }

  ParamVector per_example_grad(const ParamVector& theta, std::size_t j, Rng*) const override {
    const auto row = x_.row(static_cast<Eigen::Index>(j));
    const double z = row.dot(theta);
    return (detail::sigmoid(z) - y_[static_cast<Eigen::Index>(j)]) * row.transpose() + l2_ * theta;
  }

  ParamVector full_grad(const ParamVector& theta) const override {
    Eigen::VectorXd r = x_ * theta;
    for (Eigen::Index j = 0; j < r.size(); ++j) r[j] = detail::sigmoid(r[j]) - y_[j];
    return x_.transpose() * r / static_cast<double>(r.size()) + l2_ * theta;
  }

  ParamVector hvp(const ParamVector& theta, const ParamVector& v) const override {
    const Eigen::VectorXd z = x_ * theta;
    Eigen::VectorXd xv = x_ * v;
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      const double s = detail::sigmoid(z[j]);
      xv[j] *= s * (1.0 - s);
    }
    return x_.transpose() * xv / static_cast<double>(z.size()) + l2_ * v;
  }

  std::string name() const override { return "logistic"; }

  double l2_penalty() const { return l2_; }

 private:
  Matrix x_;
  Eigen::VectorXd y_;
  double l2_;
};

inline LogisticModel make_logistic(const Matrix& features, const std::vector<int>& labels, double l2_penalty) {
  if (features.rows() == 0 || labels.empty()) throw Error("problems", "make_logistic: empty dataset");
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw Error("problems", "make_logistic: feature rows and label count differ");
  if (l2_penalty < 0) throw Error("problems", "make_logistic: l2_penalty must be >= 0");
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] != 0 && labels[j] != 1) throw Error("problems", "make_logistic: labels must be 0 or 1");
    y[static_cast<Eigen::Index>(j)] = labels[j];
  }
  return LogisticModel(features, std::move(y), l2_penalty);
}

// ---------------------------------------------------------------------------
// One-hidden-layer tanh MLP with softmax cross-entropy

/// Parameters are packed as [W1 (hidden×input, column-major), b1 (hidden),
/// W2 (classes×hidden, column-major), b2 (classes)]. With one-hot targets the
/// KL-divergence loss equals the cross-entropy exactly, so one loss serves
/// both.
class MlpModel final : public LossModel {
 public:
  MlpModel(Eigen::Index input_dim, Eigen::Index hidden_dim, Eigen::Index class_count, Dataset data,
           ParamVector initial)
      : in_(input_dim), hid_(hidden_dim), cls_(class_count), data_(std::move(data)), init_(std::move(initial)) {}

  Eigen::Index param_dim() const override { return hid_ * (in_ + 1) + cls_ * (hid_ + 1); }
  std::size_t example_count() const override { return data_.size(); }

  double loss(const ParamVector& theta) const override {
    double s = 0.0;
    Eigen::VectorXd h(hid_), o(cls_);
    for (std::size_t j = 0; j < data_.size(); ++j) s += forward(theta, j, h, o);
    return s / static_cast<double>(data_.size());
  }

  /// Fraction of examples whose arg-max logit is the label.
  double accuracy(const ParamVector& theta) const {
    std::size_t hits = 0;
    Eigen::VectorXd h(hid_), o(cls_);
    for (std::size_t j = 0; j < data_.size(); ++j) {
      forward(theta, j, h, o);
      Eigen::Index best = 0;
      o.maxCoeff(&best);
      if (best == data_.labels[j]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data_.size());
  }

  ParamVector per_example_grad(const ParamVector& theta, std::size_t j, Rng*) const override {
    ParamVector g = ParamVector::Zero(param_dim());
    accumulate_grad(theta, j, 1.0, g);
    return g;
  }

  ParamVector full_grad(const ParamVector& theta) const override {
    ParamVector g = ParamVector::Zero(param_dim());
    const double w = 1.0 / static_cast<double>(data_.size());
    for (std::size_t j = 0; j < data_.size(); ++j) accumulate_grad(theta, j, w, g);
    return g;
  }

  ParamVector minibatch_grad_unchecked(const ParamVector& theta, std::span<const std::size_t> indices,
                                       Rng&) const override {
    ParamVector g = ParamVector::Zero(param_dim());
    const double w = 1.0 / static_cast<double>(indices.size());
    for (std::size_t j : indices) accumulate_grad(theta, j, w, g);
    return g;
  }

  /// Forward-over-reverse (Pearlmutter R-operator) Hessian-vector product.
  ParamVector hvp(const ParamVector& theta, const ParamVector& v) const override {
    ParamVector out = ParamVector::Zero(param_dim());
    const double w = 1.0 / static_cast<double>(data_.size());
    const auto [w1, b1, w2, b2] = unpack(theta);
    const auto [v1, vb1, v2, vb2] = unpack(v);
    auto [gw1, gb1, gw2, gb2] = unpack_mut(out);
    Eigen::VectorXd h(hid_), o(cls_);
    for (std::size_t j = 0; j < data_.size(); ++j) {
      const Eigen::VectorXd x = data_.features.row(static_cast<Eigen::Index>(j)).transpose();
      forward(theta, j, h, o);
      const Eigen::VectorXd p = softmax(o);
      Eigen::VectorXd dout = p;
      dout[data_.labels[j]] -= 1.0;
      const Eigen::VectorXd dtanh = (1.0 - h.array().square()).matrix();
      const Eigen::VectorXd dh = w2.transpose() * dout;

      const Eigen::VectorXd r_a = v1 * x + vb1;
      const Eigen::VectorXd r_h = dtanh.cwiseProduct(r_a);
      const Eigen::VectorXd r_o = v2 * h + w2 * r_h + vb2;
      const Eigen::VectorXd r_dout = p.cwiseProduct((r_o.array() - p.dot(r_o)).matrix());
      const Eigen::VectorXd r_dh = v2.transpose() * dout + w2.transpose() * r_dout;
      const Eigen::VectorXd r_da =
          r_dh.cwiseProduct(dtanh) - 2.0 * dh.cwiseProduct(h).cwiseProduct(r_h);

      gw2.noalias() += w * (r_dout * h.transpose() + dout * r_h.transpose());
      gb2.noalias() += w * r_dout;
      gw1.noalias() += w * (r_da * x.transpose());
      gb1.noalias() += w * r_da;
    }
    return out;
  }

  std::string name() const override { return "mlp"; }

  const ParamVector& initial_params() const { return init_; }
  const Dataset& data() const { return data_; }
  Eigen::Index input_dim() const { return in_; }
  Eigen::Index hidden_dim() const { return hid_; }
  Eigen::Index class_count() const { return cls_; }

  static Eigen::VectorXd softmax(const Eigen::VectorXd& o) {
    const double mx = o.maxCoeff();
    Eigen::VectorXd e = (o.array() - mx).exp().matrix();
    return e / e.sum();
  }

 private:
  using CMap = Eigen::Map<const Matrix>;
  using CVMap = Eigen::Map<const Eigen::VectorXd>;
  using MMap = Eigen::Map<Matrix>;
  using MVMap = Eigen::Map<Eigen::VectorXd>;

  struct Views {
    CMap w1;
    CVMap b1;
    CMap w2;
    CVMap b2;
  };
  struct MutViews {
    MMap w1;
    MVMap b1;
    MMap w2;
    MVMap b2;
  };

  Views unpack(const ParamVector& t) const {
    const double* d = t.data();
    return {CMap(d, hid_, in_), CVMap(d + hid_ * in_, hid_), CMap(d + hid_ * (in_ + 1), cls_, hid_),
            CVMap(d + hid_ * (in_ + 1) + cls_ * hid_, cls_)};
  }
  MutViews unpack_mut(ParamVector& t) const {
    double* d = t.data();
    return {MMap(d, hid_, in_), MVMap(d + hid_ * in_, hid_), MMap(d + hid_ * (in_ + 1), cls_, hid_),
            MVMap(d + hid_ * (in_ + 1) + cls_ * hid_, cls_)};
  }

  // Returns the example's cross-entropy; leaves hidden activations and logits in h, o.
  double forward(const ParamVector& theta, std::size_t j, Eigen::VectorXd& h, Eigen::VectorXd& o) const {
    const auto [w1, b1, w2, b2] = unpack(theta);
    const auto x = data_.features.row(static_cast<Eigen::Index>(j)).transpose();
    h.noalias() = w1 * x;
    h = (h + b1).array().tanh().matrix();
    o.noalias() = w2 * h;
    o += b2;
    const double mx = o.maxCoeff();
    const double lse = mx + std::log((o.array() - mx).exp().sum());
    return lse - o[data_.labels[j]];
  }

  void accumulate_grad(const ParamVector& theta, std::size_t j, double weight, ParamVector& g) const {
    Eigen::VectorXd h(hid_), o(cls_);
    forward(theta, j, h, o);
    const auto [w1, b1, w2, b2] = unpack(theta);
    auto [gw1, gb1, gw2, gb2] = unpack_mut(g);
    Eigen::VectorXd dout = softmax(o);
    dout[data_.labels[j]] -= 1.0;
    const Eigen::VectorXd da = (w2.transpose() * dout).cwiseProduct((1.0 - h.array().square()).matrix());
    const auto x = data_.features.row(static_cast<Eigen::Index>(j));
    gw2.noalias() += weight * (dout * h.transpose());
    gb2.noalias() += weight * dout;
    gw1.noalias() += weight * (da * x);
    gb1.noalias() += weight * da;
  }

  Eigen::Index in_, hid_, cls_;
  Dataset data_;
  ParamVector init_;
};

/// Weights drawn N(0, 1/fan_in), biases zero.
inline MlpModel make_mlp(Eigen::Index input_dim, Eigen::Index hidden_dim, Eigen::Index class_count,
                         const Dataset& data, std::uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1 || class_count < 1) throw Error("problems", "make_mlp: dims must be positive");
  if (data.size() == 0) throw Error("problems", "make_mlp: empty dataset");
  if (data.dim() != input_dim) throw Error("problems", "make_mlp: dataset feature count differs from input_dim");
  for (int y : data.labels)
    if (y < 0 || y >= class_count)
      throw Error("problems", "make_mlp: label " + std::to_string(y) + " out of range [0, " +
                                  std::to_string(class_count) + ")");
  const Eigen::Index p = hidden_dim * (input_dim + 1) + class_count * (hidden_dim + 1);
  ParamVector init = ParamVector::Zero(p);
  Rng rng(seed);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (Eigen::Index i = 0; i < hidden_dim * input_dim; ++i) init[i] = s1 * rng.normal();
  const Eigen::Index w2_off = hidden_dim * (input_dim + 1);
  for (Eigen::Index i = 0; i < class_count * hidden_dim; ++i) init[w2_off + i] = s2 * rng.normal();
  return MlpModel(input_dim, hidden_dim, class_count, data, std::move(init));
}

// ---------------------------------------------------------------------------
// Second-order quantities

inline constexpr Eigen::Index kDenseGuard = 2000;

/// Population-form covariance (1/N)Σ(g_j − ḡ)(g_j − ḡ)ᵀ of per-example
/// gradients: over all n examples for finite-data models, over
/// `sample_count` draws from `seed` for synthesized-noise models.
inline SymMatrix gradient_covariance(const LossModel& model, const ParamVector& theta, std::size_t sample_count,
                                     std::uint64_t seed = 0) {
  const Eigen::Index p = model.param_dim();
  if (p > kDenseGuard) throw Error("problems", "gradient_covariance: p exceeds dense guard");
  const std::size_t n = model.synthesized_noise() ? sample_count : model.example_count();
  if (n < 2) throw Error("problems", "gradient_covariance: fewer than 2 gradient samples");
  Rng rng(seed);
  Matrix g(p, static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) g.col(static_cast<Eigen::Index>(j)) = model.per_example_grad(theta, j, &rng);
  const Eigen::VectorXd mean = g.rowwise().mean();
  g.colwise() -= mean;
  return SymMatrix::symmetrized(g * g.transpose() / static_cast<double>(n));
}

/// Dense Hessian assembled column by column from HVPs and symmetrized.
/// When `asymmetry` is given it receives ‖H−Hᵀ‖_F of the raw assembly.
inline SymMatrix hessian_dense(const LossModel& model, const ParamVector& theta, double* asymmetry = nullptr) {
  const Eigen::Index p = model.param_dim();
  if (p > kDenseGuard) throw Error("problems", "hessian_dense: p exceeds dense guard");
  Matrix h(p, p);
  ParamVector e = ParamVector::Zero(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    e[i] = 1.0;
    h.col(i) = model.hvp(theta, e);
    e[i] = 0.0;
  }
  if (asymmetry != nullptr) *asymmetry = (h - h.transpose()).norm();
  return SymMatrix::symmetrized(h);
}

}  // namespace sgdscope
