#include "eqddm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace eqddm::eval {

double nrmse_pct(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth,
                 const data::Mask& mask) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() ||
      mask.rows() != truth.rows() || mask.cols() != truth.cols())
    throw std::invalid_argument("nrmse: shape mismatch");
  double sq_sum = 0.0;
  long count = 0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t < truth.rows(); ++t)
    for (Eigen::Index c = 0; c < truth.cols(); ++c) {
      if (!mask(t, c)) continue;
      const double err = pred(t, c) - truth(t, c);
      sq_sum += err * err;
      lo = std::min(lo, truth(t, c));
      hi = std::max(hi, truth(t, c));
      ++count;
    }
  if (count == 0) throw std::invalid_argument("nrmse: no observed entries");
  const double range = hi - lo;
  if (range <= 0.0) throw std::invalid_argument("nrmse: observed truth is constant (zero range)");
  return 100.0 * std::sqrt(sq_sum / static_cast<double>(count)) / range;
}

namespace {

std::string format_num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double case_nrmse(const ssm::RollingResult& rolling, const Eigen::MatrixXd& truth_raw,
                  const data::Mask& mask, const data::ScaleTransform& tr) {
  const Eigen::MatrixXd pred_raw = tr.invert_values(rolling.predictions);
  const int skip = rolling.warmup;
  return nrmse_pct(pred_raw.bottomRows(pred_raw.rows() - skip),
                   truth_raw.bottomRows(truth_raw.rows() - skip),
                   mask.bottomRows(mask.rows() - skip));
}

}  // namespace

Evaluation evaluate(const ssm::Model& model, const data::ScaleTransform& transform,
                    const std::vector<data::Sequence>& tests_raw, const EvalOptions& options,
                    std::vector<EvalDetail>* details) {
  Evaluation out;
  if (details) details->clear();
  std::vector<double> regular_values;
  std::vector<double> rotated_mean_values;

  for (const auto& test_raw : tests_raw) {
    const data::Sequence normalized = transform.apply(test_raw);
    const ssm::RollingResult rolling = ssm::rolling_predict(model, normalized, options.seed);
    const double regular = case_nrmse(rolling, test_raw.values, test_raw.mask, transform);
    out.rows.push_back({test_raw.name, options.variant, "none", regular});
    regular_values.push_back(regular);
    if (details)
      details->push_back({test_raw.name, "none", rolling, test_raw.values, test_raw.mask});

    if (options.n_rotations > 0) {
      Rng angle_rng(options.seed);
      std::vector<double> angles;
      const std::vector<data::Sequence> rotated =
          data::make_rotated_testset(test_raw, options.n_rotations, angle_rng, &angles);
      std::vector<double> rot_values;
      for (size_t i = 0; i < rotated.size(); ++i) {
        const data::Sequence rot_norm = transform.apply(rotated[i]);
        const ssm::RollingResult rot_rolling = ssm::rolling_predict(model, rot_norm, options.seed);
        const double v = case_nrmse(rot_rolling, rotated[i].values, rotated[i].mask, transform);
        out.rows.push_back({test_raw.name, options.variant, format_num(angles[i]), v});
        rot_values.push_back(v);
        if (details)
          details->push_back(
              {test_raw.name, format_num(angles[i]), rot_rolling, rotated[i].values, rotated[i].mask});
      }
      double mean = 0.0;
      for (double v : rot_values) mean += v;
      mean /= static_cast<double>(rot_values.size());
      out.rows.push_back({test_raw.name, options.variant, "rotated-mean", mean});
      rotated_mean_values.push_back(mean);
    }
  }

  if (tests_raw.size() > 1) {
    double mean = 0.0;
    for (double v : regular_values) mean += v;
    out.rows.push_back({"mean", options.variant, "none", mean / regular_values.size()});
    if (!rotated_mean_values.empty()) {
      double rmean = 0.0;
      for (double v : rotated_mean_values) rmean += v;
      out.rows.push_back(
          {"mean", options.variant, "rotated-mean", rmean / rotated_mean_values.size()});
    }
  }
  return out;
}

std::string Evaluation::to_csv() const {
  std::ostringstream out;
  out << "dataset,variant,rotation,nrmse_pct\n";
  for (const auto& row : rows)
    out << row.dataset << ',' << row.variant << ',' << row.rotation << ','
        << format_num(row.nrmse) << "\n";
  return out.str();
}

std::string Evaluation::to_table() const {
  std::ostringstream out;
  out << "dataset                  variant       rotation              nrmse%\n";
  out << "--------------------------------------------------------------------\n";
  for (const auto& row : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-24s %-13s %-20s %8.3f\n", row.dataset.c_str(),
                  row.variant.c_str(), row.rotation.c_str(), row.nrmse);
    out << line;
  }
  return out.str();
}

std::string Evaluation::to_json() const {
  std::ostringstream out;
  out << "[\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    out << "  {\"dataset\": \"" << rows[i].dataset << "\", \"variant\": \"" << rows[i].variant
        << "\", \"rotation\": \"" << rows[i].rotation << "\", \"nrmse_pct\": "
        << format_num(rows[i].nrmse) << "}" << (i + 1 < rows.size() ? "," : "") << "\n";
  }
  out << "]\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// PredictionTable
// ---------------------------------------------------------------------------

PredictionTable PredictionTable::from_rolling(const ssm::RollingResult& rolling,
                                              const Eigen::MatrixXd& truth_raw,
                                              const data::Mask& mask,
                                              const data::ScaleTransform& transform) {
  PredictionTable table;
  table.timesteps = static_cast<int>(truth_raw.rows());
  table.joints = static_cast<int>(truth_raw.cols()) / 3;
  table.n_states = static_cast<int>(rolling.q_states.cols());
  table.warmup = rolling.warmup;
  table.predicted = transform.invert_values(rolling.predictions);
  table.truth = truth_raw;
  table.sigma = transform.invert_spread(rolling.pred_sigma);
  table.observed = mask;
  table.q_states = rolling.q_states;
  table.state = rolling.state_argmax;
  return table;
}

void PredictionTable::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("prediction csv: cannot open '" + path + "' for writing");
  out << "t,joint,axis,predicted,truth,observed";
  for (int s = 0; s < n_states; ++s) out << ",q_s" << s;
  out << ",pred_sigma\n";
  const char* axes = "xyz";
  for (int t = 0; t < timesteps; ++t)
    for (int j = 0; j < joints; ++j)
      for (int a = 0; a < 3; ++a) {
        const int c = 3 * j + a;
        out << t << ',' << j << ',' << axes[a] << ',' << format_num(predicted(t, c)) << ','
            << format_num(truth(t, c)) << ',' << (observed(t, c) ? 1 : 0);
        for (int s = 0; s < n_states; ++s) out << ',' << format_num(q_states(t, s));
        out << ',' << format_num(sigma(t, c)) << "\n";
      }
  if (!out) throw std::runtime_error("prediction csv: write failure on '" + path + "'");
}

PredictionTable PredictionTable::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("prediction csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("prediction csv: empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 8 || header[0] != "t" || header[1] != "joint" || header[2] != "axis")
    throw std::runtime_error("prediction csv: unexpected header");
  const int n_states = static_cast<int>(header.size()) - 7;

  struct Row {
    int t, joint, axis;
    double pred, truth, sigma;
    bool obs;
    std::vector<double> q;
  };
  std::vector<Row> rows;
  int max_t = -1, max_j = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (static_cast<int>(cells.size()) != 7 + n_states)
      throw std::runtime_error("prediction csv: ragged row");
    Row r;
    r.t = std::stoi(cells[0]);
    r.joint = std::stoi(cells[1]);
    r.axis = cells[2] == "x" ? 0 : cells[2] == "y" ? 1 : 2;
    r.pred = std::stod(cells[3]);
    r.truth = std::stod(cells[4]);
    r.obs = cells[5] != "0";
    for (int s = 0; s < n_states; ++s) r.q.push_back(std::stod(cells[6 + s]));
    r.sigma = std::stod(cells[6 + n_states]);
    max_t = std::max(max_t, r.t);
    max_j = std::max(max_j, r.joint);
    rows.push_back(std::move(r));
  }
  PredictionTable table;
  table.timesteps = max_t + 1;
  table.joints = max_j + 1;
  table.n_states = n_states;
  const int dims = table.joints * 3;
  table.predicted = Eigen::MatrixXd::Zero(table.timesteps, dims);
  table.truth = Eigen::MatrixXd::Zero(table.timesteps, dims);
  table.sigma = Eigen::MatrixXd::Zero(table.timesteps, dims);
  table.observed = data::Mask::Constant(table.timesteps, dims, false);
  table.q_states = Eigen::MatrixXd::Zero(table.timesteps, n_states);
  table.state = Eigen::VectorXi::Zero(table.timesteps);
  for (const auto& r : rows) {
    const int c = 3 * r.joint + r.axis;
    table.predicted(r.t, c) = r.pred;
    table.truth(r.t, c) = r.truth;
    table.sigma(r.t, c) = r.sigma;
    table.observed(r.t, c) = r.obs;
    for (int s = 0; s < n_states; ++s) table.q_states(r.t, s) = r.q[s];
  }
  for (int t = 0; t < table.timesteps; ++t) {
    Eigen::Index best = 0;
    table.q_states.row(t).maxCoeff(&best);
    table.state[t] = static_cast<int>(best);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Plot series and SVG
// ---------------------------------------------------------------------------

namespace {

void write_svg(const std::string& path, const Eigen::VectorXd& truth,
               const Eigen::VectorXd& pred, const Eigen::VectorXd& lower,
               const Eigen::VectorXd& upper) {
  const int T = static_cast<int>(truth.size());
  const double width = 800.0, height = 300.0, margin = 40.0;
  double lo = std::min({truth.minCoeff(), pred.minCoeff(), lower.minCoeff()});
  double hi = std::max({truth.maxCoeff(), pred.maxCoeff(), upper.maxCoeff()});
  if (hi <= lo) hi = lo + 1.0;
  auto sx = [&](int t) { return margin + (width - 2 * margin) * t / std::max(1, T - 1); };
  auto sy = [&](double v) { return height - margin - (height - 2 * margin) * (v - lo) / (hi - lo); };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("svg: cannot open '" + path + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << width - 2 * margin
      << "\" height=\"" << height - 2 * margin
      << "\" fill=\"white\" stroke=\"#888\" stroke-width=\"1\"/>\n";
  // uncertainty band
  out << "<polygon fill=\"#f4c6c6\" stroke=\"none\" points=\"";
  for (int t = 0; t < T; ++t) out << sx(t) << ',' << sy(upper[t]) << ' ';
  for (int t = T - 1; t >= 0; --t) out << sx(t) << ',' << sy(lower[t]) << ' ';
  out << "\"/>\n";
  auto polyline = [&](const Eigen::VectorXd& series, const char* color) {
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (int t = 0; t < T; ++t) out << sx(t) << ',' << sy(series[t]) << ' ';
    out << "\"/>\n";
  };
  polyline(truth, "#1f4e9c");
  polyline(pred, "#c23b3b");
  out << "</svg>\n";
}

}  // namespace

void emit_plot_data(const PredictionTable& table, const std::string& out_dir, bool svg) {
  std::filesystem::create_directories(out_dir);
  const char* axes = "xyz";
  for (int j = 0; j < table.joints; ++j)
    for (int a = 0; a < 3; ++a) {
      const int c = 3 * j + a;
      const std::string base =
          out_dir + "/series_j" + std::to_string(j) + "_" + axes[a];
      std::ofstream out(base + ".csv");
      if (!out) throw std::runtime_error("plot: cannot open '" + base + ".csv'");
      out << "t,truth,prediction,lower,upper,state\n";
      Eigen::VectorXd truth(table.timesteps), pred(table.timesteps), lower(table.timesteps),
          upper(table.timesteps);
      for (int t = 0; t < table.timesteps; ++t) {
        truth[t] = table.truth(t, c);
        pred[t] = table.predicted(t, c);
        lower[t] = pred[t] - 2.0 * table.sigma(t, c);
        upper[t] = pred[t] + 2.0 * table.sigma(t, c);
        out << t << ',' << format_num(truth[t]) << ',' << format_num(pred[t]) << ','
            << format_num(lower[t]) << ',' << format_num(upper[t]) << ',' << table.state[t]
            << "\n";
      }
      if (svg) write_svg(base + ".svg", truth, pred, lower, upper);
    }
}

}  // namespace eqddm::eval
