#pragma once

// JSON forms of the experiment and estimator reports. Field names follow the
// CSV column names.

#include <vector>

#include <nlohmann/json.hpp>

#include "sgdscope/estimators.hpp"
#include "sgdscope/experiments.hpp"

namespace sgdscope {

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}
}  // namespace detail

inline nlohmann::json to_json(const ScanRow& r) {
  return {{"experiment_id", r.experiment_id},
          {"bs", r.batch_size},
          {"lr", r.learning_rate},
          {"bs_over_lr", r.bs_over_lr},
          {"tr_h", r.tr_h},
          {"tr_sigma2", r.tr_sigma2},
          {"tr_sigma2_h", r.tr_sigma2_h},
          {"excess_loss", r.excess_loss},
          {"grad_norm_sq", r.grad_norm_sq},
          {"pred_j2018", detail::opt_json(r.pred_j2018)},
          {"pred_w2019_loss", detail::opt_json(r.pred_w2019_loss)},
          {"pred_w2019_gradnorm", detail::opt_json(r.pred_w2019_gradnorm)},
          {"magnitude_diff", detail::opt_json(r.magnitude_diff)},
          {"minimum_located", r.minimum_located},
          {"replicas", r.replicas}};
}

inline nlohmann::json to_json(const std::vector<ScanRow>& rows) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rows) a.push_back(to_json(r));
  return a;
}

inline nlohmann::json to_json(const PredictionReport& r) {
  return {{"lr", r.learning_rate},
          {"bs", r.batch_size},
          {"tr_h", r.tr_h},
          {"tr_sigma2", r.tr_sigma2},
          {"tr_sigma2_h", r.tr_sigma2_h},
          {"pred_j2018", r.pred_loss_j2018},
          {"pred_w2019_loss", r.pred_excess_loss_w2019},
          {"pred_w2019_gradnorm", r.pred_gradnorm_w2019},
          {"magnitude_diff", detail::opt_json(r.magnitude_difference)}};
}

inline nlohmann::json to_json(const StationaryStats& s) {
  nlohmann::json j = {{"mean_loss", s.mean_loss},
                      {"mean_grad_norm_sq", s.mean_grad_norm_sq},
                      {"sample_count", s.sample_count},
                      {"burn_in_fraction", s.burn_in_fraction}};
  if (s.empirical_param_cov) j["empirical_param_cov"] = detail::matrix_json(s.empirical_param_cov->matrix());
  return j;
}

inline nlohmann::json to_json(const CurveSet& set) {
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& c : set.curves) {
    curves.push_back({{"config_label", c.label},
                      {"ratio_class", to_string(c.ratio_class)},
                      {"lr", c.config.learning_rate},
                      {"bs", c.config.batch_size},
                      {"bs_over_lr", static_cast<double>(c.config.batch_size) / c.config.learning_rate},
                      {"divergence", c.divergence}});
  }
  return {{"curves", curves},
          {"same_ratio", detail::opt_json(set.same_ratio)},
          {"near_ratio", detail::opt_json(set.near_ratio)},
          {"far_ratio", detail::opt_json(set.far_ratio)}};
}

inline nlohmann::json to_json(const CltReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    std::vector<double> mean(row.mean_v.data(), row.mean_v.data() + row.mean_v.size());
    rows.push_back({{"lr", row.learning_rate},
                    {"steps", row.steps},
                    {"replica_cov", detail::matrix_json(row.replica_cov.matrix())},
                    {"mean_v", mean},
                    {"rel_error", row.rel_error},
                    {"noise_level", row.noise_level}});
  }
  return {{"bs", r.batch_size},
          {"t_end", r.t_end},
          {"replicas", r.replicas},
          {"predicted_cov", detail::matrix_json(r.predicted_cov.matrix())},
          {"rows", rows},
          {"non_increasing", r.non_increasing},
          {"smallest_le_largest", r.smallest_le_largest}};
}

inline nlohmann::json to_json(const SaddleReport& r) {
  return {{"verdict", to_string(r.verdict)},
          {"lr", r.learning_rate},
          {"bs", r.batch_size},
          {"negative_eigenvalue", r.negative_eigenvalue},
          {"expected_rate", r.expected_rate},
          {"median_final_norm", r.median_final_norm},
          {"median_rate", r.median_rate},
          {"final_norms", r.final_norms},
          {"rates", r.rates},
          {"escape_steps", r.escape_steps}};
}

}  // namespace sgdscope
