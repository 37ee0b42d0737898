#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "eqddm/rng.hpp"

namespace eqddm::data {

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// A trajectory: T x (D*3) observations with an observation mask
/// (true = observed). Columns are grouped per joint as (x, y, z).
struct Sequence {
  Eigen::MatrixXd values;
  Mask mask;
  std::string name;
  double dt = 0.0;

  int timesteps() const { return static_cast<int>(values.rows()); }
  int dims() const { return static_cast<int>(values.cols()); }
  int joints() const { return dims() / 3; }

  static Sequence dense(Eigen::MatrixXd values, std::string name = "", double dt = 0.0);
};

/// Planar pendulum setup. The bob swings in the y-z plane around the origin;
/// emitted coordinates are (0, L sin(theta), -L cos(theta)).
struct PendulumSpec {
  int timesteps = 410;
  double dt = 0.05;
  double gravity = 9.81;
  double length = 1.0;
  double theta0 = M_PI / 2.0;
  double omega0 = 0.0;
  double noise_sigma = 0.0;  ///< additive observation noise (0 = noiseless)
};

/// Integrates theta'' = -(g/L) sin(theta) with classic fourth-order
/// Runge-Kutta steps and records the 3D bob position. `rng` is only used
/// when noise_sigma > 0.
Sequence simulate_pendulum(const PendulumSpec& spec, Rng* rng = nullptr);

/// Oracle companion to the simulator: total energy (1/2) L^2 w^2 - g L cos(theta)
/// per timestep from a noiseless state trajectory.
std::vector<double> pendulum_energy(const PendulumSpec& spec);

/// First ceil(T/2) timesteps for training, the rest for testing.
/// Throws when T < 2 * (max_lag + 1).
std::pair<Sequence, Sequence> split_half(const Sequence& seq, int max_lag);

/// Rotates every joint triple by the given angle about the z axis.
Sequence rotate_sequence(const Sequence& seq, double angle_rad);

/// n_angles copies rotated by uniform draws on [0, 2pi). Deterministic per
/// seed; the drawn angles are reported through `angles_out` when non-null.
std::vector<Sequence> make_rotated_testset(const Sequence& seq, int n_angles, Rng& rng,
                                           std::vector<double>* angles_out = nullptr);

/// CSV schema: header `t,j0_x,j0_y,j0_z,...`; one row per timestep; empty
/// cells mark missing values. Values are written with full float64 precision
/// so a save/load round trip is value-identical.
void save_csv(const Sequence& seq, const std::string& path);
Sequence load_csv(const std::string& path);

/// Uniform rescaling x -> scale * (x - offset) applied to every joint triple,
/// fitted so the training data fits [-1, 1]. A single scalar scale keeps
/// rotational structure intact (a per-axis scale would not).
struct ScaleTransform {
  double scale = 1.0;
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();

  static ScaleTransform fit(const Sequence& seq);
  Sequence apply(const Sequence& seq) const;
  Sequence invert(const Sequence& seq) const;
  Eigen::MatrixXd invert_values(const Eigen::MatrixXd& values) const;
  /// Scale-only inverse for spread quantities (standard deviations).
  Eigen::MatrixXd invert_spread(const Eigen::MatrixXd& sigmas) const;
};

}  // namespace eqddm::data
