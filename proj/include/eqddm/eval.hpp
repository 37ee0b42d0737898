#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "eqddm/data.hpp"
#include "eqddm/ssm.hpp"

namespace eqddm::eval {

/// 100 * RMSE over observed entries / (max - min) of the observed truth.
/// Throws when nothing is observed or the observed truth is constant.
double nrmse_pct(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth,
                 const data::Mask& mask);

struct EvalCase {
  std::string dataset;
  std::string variant;   ///< "equivariant" or "ablation"
  std::string rotation;  ///< "none", the angle in radians, or "rotated-mean"
  double nrmse = 0.0;
};

struct Evaluation {
  std::vector<EvalCase> rows;

  std::string to_csv() const;    ///< dataset,variant,rotation,nrmse_pct
  std::string to_table() const;  ///< human-readable
  std::string to_json() const;
};

struct EvalOptions {
  int n_rotations = 0;
  std::uint64_t seed = 0;
  std::string variant = "equivariant";
  /// When set, the rolling prediction table of every case is kept.
  bool keep_predictions = false;
};

struct EvalDetail {
  std::string dataset;
  std::string rotation;
  ssm::RollingResult rolling;        ///< normalized scale
  Eigen::MatrixXd truth_raw;         ///< original scale
  data::Mask mask;
};

/// Rolling prediction over every test sequence plus its rotated copies
/// (fresh angle draws per seed), NRMSE computed on the original data scale
/// with the warmup rows excluded. Deterministic given (model, seed).
Evaluation evaluate(const ssm::Model& model, const data::ScaleTransform& transform,
                    const std::vector<data::Sequence>& tests_raw, const EvalOptions& options,
                    std::vector<EvalDetail>* details = nullptr);

/// Long-format prediction table (one row per t, joint, axis) carrying the
/// predictions, truth, observation flags, per-state posteriors and the
/// predictive sigma, all on the original data scale.
struct PredictionTable {
  int timesteps = 0;
  int joints = 0;
  int n_states = 0;
  int warmup = 0;
  Eigen::MatrixXd predicted;  ///< T x 3D
  Eigen::MatrixXd truth;      ///< T x 3D
  Eigen::MatrixXd sigma;      ///< T x 3D
  data::Mask observed;        ///< T x 3D
  Eigen::MatrixXd q_states;   ///< T x S
  Eigen::VectorXi state;      ///< argmax per t

  static PredictionTable from_rolling(const ssm::RollingResult& rolling,
                                      const Eigen::MatrixXd& truth_raw, const data::Mask& mask,
                                      const data::ScaleTransform& transform);
  void save_csv(const std::string& path) const;
  static PredictionTable load_csv(const std::string& path);
};

/// Per-(joint, axis) plot series files `series_j<j>_<axis>.csv` with columns
/// t, truth, prediction, lower, upper, state (bands are prediction +- 2
/// sigma), plus self-contained SVG line charts when requested.
void emit_plot_data(const PredictionTable& table, const std::string& out_dir, bool svg);

}  // namespace eqddm::eval
