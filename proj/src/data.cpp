#include "eqddm/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace eqddm::data {

Sequence Sequence::dense(Eigen::MatrixXd values, std::string name, double dt) {
  Sequence seq;
  seq.mask = Mask::Constant(values.rows(), values.cols(), true);
  seq.values = std::move(values);
  seq.name = std::move(name);
  seq.dt = dt;
  return seq;
}

namespace {

struct PendulumState {
  double theta;
  double omega;
};

PendulumState rk4_step(const PendulumState& s, double dt, double g_over_l) {
  auto deriv = [g_over_l](const PendulumState& x) {
    return PendulumState{x.omega, -g_over_l * std::sin(x.theta)};
  };
  const PendulumState k1 = deriv(s);
  const PendulumState k2 = deriv({s.theta + 0.5 * dt * k1.theta, s.omega + 0.5 * dt * k1.omega});
  const PendulumState k3 = deriv({s.theta + 0.5 * dt * k2.theta, s.omega + 0.5 * dt * k2.omega});
  const PendulumState k4 = deriv({s.theta + dt * k3.theta, s.omega + dt * k3.omega});
  return {s.theta + dt / 6.0 * (k1.theta + 2.0 * k2.theta + 2.0 * k3.theta + k4.theta),
          s.omega + dt / 6.0 * (k1.omega + 2.0 * k2.omega + 2.0 * k3.omega + k4.omega)};
}

// internal substeps per emitted interval; keeps the energy drift of the
// emitted trajectory near float64 noise at the default dt
constexpr int kSubsteps = 8;

std::vector<PendulumState> integrate(const PendulumSpec& spec) {
  if (spec.dt <= 0.0) throw std::invalid_argument("simulate_pendulum: dt must be positive");
  if (spec.length <= 0.0) throw std::invalid_argument("simulate_pendulum: length must be positive");
  if (spec.timesteps < 2) throw std::invalid_argument("simulate_pendulum: need at least 2 timesteps");
  std::vector<PendulumState> states;
  states.reserve(spec.timesteps);
  PendulumState s{spec.theta0, spec.omega0};
  const double g_over_l = spec.gravity / spec.length;
  const double h = spec.dt / kSubsteps;
  for (int t = 0; t < spec.timesteps; ++t) {
    states.push_back(s);
    for (int sub = 0; sub < kSubsteps; ++sub) s = rk4_step(s, h, g_over_l);
  }
  return states;
}

}  // namespace

Sequence simulate_pendulum(const PendulumSpec& spec, Rng* rng) {
  const auto states = integrate(spec);
  Eigen::MatrixXd values(spec.timesteps, 3);
  for (int t = 0; t < spec.timesteps; ++t) {
    values(t, 0) = 0.0;
    values(t, 1) = spec.length * std::sin(states[t].theta);
    values(t, 2) = -spec.length * std::cos(states[t].theta);
  }
  if (spec.noise_sigma > 0.0) {
    if (!rng) throw std::invalid_argument("simulate_pendulum: noise requested without an rng");
    for (int t = 0; t < spec.timesteps; ++t)
      for (int j = 0; j < 3; ++j) values(t, j) += spec.noise_sigma * rng->normal();
  }
  return Sequence::dense(std::move(values), "pendulum", spec.dt);
}

std::vector<double> pendulum_energy(const PendulumSpec& spec) {
  const auto states = integrate(spec);
  std::vector<double> energy;
  energy.reserve(states.size());
  const double l = spec.length;
  for (const auto& s : states)
    energy.push_back(0.5 * l * l * s.omega * s.omega - spec.gravity * l * std::cos(s.theta));
  return energy;
}

std::pair<Sequence, Sequence> split_half(const Sequence& seq, int max_lag) {
  const int t = seq.timesteps();
  // the training half must keep at least max_lag + 1 points
  const int needed = std::max(2, 2 * max_lag + 1);
  if (t < needed)
    throw std::invalid_argument("split_half: sequence too short for a train/test split (T=" +
                                std::to_string(t) + ", need >= " + std::to_string(needed) + ")");
  const int cut = (t + 1) / 2;
  Sequence train, test;
  train.values = seq.values.topRows(cut);
  train.mask = seq.mask.topRows(cut);
  train.name = seq.name + "_train";
  train.dt = seq.dt;
  test.values = seq.values.bottomRows(t - cut);
  test.mask = seq.mask.bottomRows(t - cut);
  test.name = seq.name + "_test";
  test.dt = seq.dt;
  return {train, test};
}

Sequence rotate_sequence(const Sequence& seq, double angle_rad) {
  if (!std::isfinite(angle_rad)) throw std::invalid_argument("rotate_sequence: non-finite angle");
  if (seq.dims() % 3 != 0)
    throw std::invalid_argument("rotate_sequence: column count is not a multiple of 3");
  Eigen::Matrix3d rot;
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  rot << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  Sequence out = seq;
  for (int t = 0; t < seq.timesteps(); ++t)
    for (int j = 0; j < seq.joints(); ++j)
      out.values.row(t).segment<3>(3 * j) = (rot * seq.values.row(t).segment<3>(3 * j).transpose()).transpose();
  return out;
}

std::vector<Sequence> make_rotated_testset(const Sequence& seq, int n_angles, Rng& rng,
                                           std::vector<double>* angles_out) {
  std::vector<Sequence> out;
  if (angles_out) angles_out->clear();
  for (int i = 0; i < n_angles; ++i) {
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    Sequence rotated = rotate_sequence(seq, angle);
    rotated.name = seq.name + "_rot" + std::to_string(i);
    out.push_back(std::move(rotated));
    if (angles_out) angles_out->push_back(angle);
  }
  return out;
}

namespace {
std::string format_full(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}
}  // namespace

void save_csv(const Sequence& seq, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_csv: cannot open '" + path + "' for writing");
  out << "t";
  for (int j = 0; j < seq.joints(); ++j)
    out << ",j" << j << "_x,j" << j << "_y,j" << j << "_z";
  out << "\n";
  for (int t = 0; t < seq.timesteps(); ++t) {
    out << t;
    for (int c = 0; c < seq.dims(); ++c) {
      out << ',';
      if (seq.mask(t, c)) out << format_full(seq.values(t, c));
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_csv: write failure on '" + path + "'");
}

Sequence load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_csv: empty file '" + path + "'");
  // header: t,j0_x,j0_y,j0_z,...
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "t" || (header.size() - 1) % 3 != 0)
    throw std::runtime_error("load_csv: malformed header in '" + path +
                             "' (expected t,j0_x,j0_y,j0_z,...)");
  const int dims = static_cast<int>(header.size()) - 1;

  std::vector<std::vector<std::pair<bool, double>>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::pair<bool, double>> row;
    // split keeping empty trailing cells
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                    : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<int>(cells.size()) != dims + 1)
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(dims + 1));
    for (int c = 1; c <= dims; ++c) {
      const std::string& s = cells[c];
      if (s.empty()) {
        row.emplace_back(false, 0.0);
        continue;
      }
      size_t used = 0;
      double v;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size())
        throw std::runtime_error("load_csv: non-numeric cell '" + s + "' at line " +
                                 std::to_string(line_no));
      row.emplace_back(true, v);
    }
    rows.push_back(std::move(row));
  }

  Sequence seq;
  seq.values = Eigen::MatrixXd::Zero(rows.size(), dims);
  seq.mask = Mask::Constant(rows.size(), dims, false);
  for (size_t t = 0; t < rows.size(); ++t)
    for (int c = 0; c < dims; ++c) {
      seq.mask(t, c) = rows[t][c].first;
      seq.values(t, c) = rows[t][c].second;
    }
  seq.name = path;
  return seq;
}

ScaleTransform ScaleTransform::fit(const Sequence& seq) {
  ScaleTransform tr;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  long count = 0;
  for (int t = 0; t < seq.timesteps(); ++t)
    for (int j = 0; j < seq.joints(); ++j) {
      bool observed = true;
      for (int a = 0; a < 3; ++a) observed = observed && seq.mask(t, 3 * j + a);
      if (!observed) continue;
      centroid += seq.values.row(t).segment<3>(3 * j).transpose();
      ++count;
    }
  if (count == 0) throw std::invalid_argument("ScaleTransform::fit: no fully observed joints");
  centroid /= static_cast<double>(count);
  double max_abs = 0.0;
  for (int t = 0; t < seq.timesteps(); ++t)
    for (int c = 0; c < seq.dims(); ++c)
      if (seq.mask(t, c))
        max_abs = std::max(max_abs, std::abs(seq.values(t, c) - centroid[c % 3]));
  tr.offset = centroid;
  tr.scale = max_abs > 0.0 ? 1.0 / max_abs : 1.0;
  return tr;
}

Sequence ScaleTransform::apply(const Sequence& seq) const {
  Sequence out = seq;
  for (int t = 0; t < seq.timesteps(); ++t)
    for (int j = 0; j < seq.joints(); ++j)
      out.values.row(t).segment<3>(3 * j) =
          scale * (seq.values.row(t).segment<3>(3 * j).transpose() - offset).transpose();
  return out;
}

Sequence ScaleTransform::invert(const Sequence& seq) const {
  Sequence out = seq;
  out.values = invert_values(seq.values);
  return out;
}

Eigen::MatrixXd ScaleTransform::invert_values(const Eigen::MatrixXd& values) const {
  Eigen::MatrixXd out = values / scale;
  for (Eigen::Index t = 0; t < out.rows(); ++t)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(t, c) += offset[c % 3];
  return out;
}

Eigen::MatrixXd ScaleTransform::invert_spread(const Eigen::MatrixXd& sigmas) const {
  return sigmas / scale;
}

}  // namespace eqddm::data
