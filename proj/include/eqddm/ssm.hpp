#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqddm/autodiff.hpp"
#include "eqddm/data.hpp"
#include "eqddm/equivariant.hpp"
#include "eqddm/lie.hpp"

namespace eqddm::ssm {

/// Floor added to every softplus-mapped standard deviation.
inline constexpr double kSigmaFloor = 1e-6;

struct ModelConfig {
  int S = 2;                      ///< number of discrete states
  int K = 3;                      ///< continuous latent dimension
  std::vector<int> lags = {1, 2};
  int D = 1;                      ///< number of joints
  double sigma_x = 0.1;           ///< observation noise (data pre-scaled to [-1,1])
  bool sigma_x_trainable = false;
  double lr = 0.01;
  int epochs = 3000;
  std::uint64_t seed = 0;
  int infer_steps = 50;           ///< per-timestep gradient steps at test time
  bool ablation = false;          ///< unconstrained dense layers instead of equivariant ones
  int pi_width_mult = 3;
  int trans_width_mult = 5;
  int emis_width_mult = 2;
  /// Latent signature; empty means the default (K/3 rank-1 copies). K not
  /// divisible by 3 requires an explicit signature with rank-0 padding.
  lie::RepSignature latent_signature;

  int max_lag() const;
  lie::RepSignature effective_latent_signature() const;
  lie::RepSignature obs_signature() const;
  void validate() const;

  /// Flat key=value file ('#' comments). Unknown keys are an error.
  static ModelConfig from_file(const std::string& path);
  void apply_key(const std::string& key, const std::string& value);
  std::string describe() const;
};

/// The generative model: emission network, per-state transition networks
/// (per-lag equivariant stacks pooled over the lag axis, with an equivariant
/// mean head and an invariant softplus sigma head), per-state switch
/// networks, and the observation noise. All parameters live in one store
/// under "theta.*".
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return theta_; }
  const ad::ParamStore& params() const { return theta_; }
  int free_parameter_count() const;

  // tape forwards
  ad::Var emission_mean(ad::Tape& tape, ad::Var z) const;
  /// (mean, sigma) of p(z_t | z_hist, s); z_hist ordered like config().lags.
  std::pair<ad::Var, ad::Var> transition(ad::Tape& tape, int s,
                                         const std::vector<ad::Var>& z_hist) const;
  ad::Var switch_probs(ad::Tape& tape, int s_prev, ad::Var z_prev) const;
  ad::Var sigma_x(ad::Tape& tape) const;  ///< 1x1

  // plain forwards
  Eigen::VectorXd emission_mean(const Eigen::VectorXd& z) const;
  std::pair<Eigen::VectorXd, Eigen::VectorXd> transition(
      int s, const std::vector<Eigen::VectorXd>& z_hist) const;
  Eigen::VectorXd switch_probs(int s_prev, const Eigen::VectorXd& z_prev) const;
  double sigma_x_value() const;

  /// d(emission)/dz by reverse passes, one per output row.
  Eigen::MatrixXd emission_jacobian(const Eigen::VectorXd& z) const;

  /// Bayes posterior over s_t: prior = sum_{s'} q_prev[s'] pi^{s'}(z_prev),
  /// likelihood = N(z_t; transition(s, z_hist)); normalized in log space.
  /// Falls back to the prior (with a warning on stderr) if every posterior
  /// weight underflows to zero.
  Eigen::VectorXd q_state_posterior(const Eigen::VectorXd& q_prev, const Eigen::VectorXd& z_prev,
                                    const Eigen::VectorXd& z_t,
                                    const std::vector<Eigen::VectorXd>& z_hist) const;

 private:
  ModelConfig cfg_;
  ad::ParamStore theta_;
  eqv::Network emission_;
  std::vector<eqv::Network> pi_;            // one per previous state
  std::vector<eqv::Network> trans_trunk_;   // per state: lag streams + pool + hidden
  std::vector<eqv::Network> trans_mean_;    // per state: hidden -> latent
  std::vector<eqv::Network> trans_sigma_;   // per state: hidden -> K scalars (pre-softplus)
  /// Averages the sigma head's outputs within each latent block. A diagonal
  /// transition covariance is rotation invariant only when it is constant on
  /// every vector copy; this pooling enforces that exactly.
  Eigen::MatrixXd sigma_block_pool_;
};

/// Same architecture and training path with every equivariant projection
/// replaced by a full free weight matrix.
Model build_ablation(ModelConfig cfg);

// ---------------------------------------------------------------------------
// Variational parameters and the ELBO
// ---------------------------------------------------------------------------

std::string phi_mu_name(int seq_index, int t);
std::string phi_rho_name(int seq_index, int t);

/// Creates "phi.*" entries for every (sequence, timestep).
void init_variational_params(const Model& model, const std::vector<data::Sequence>& seqs,
                             ad::ParamStore& phi, Rng& rng);

struct ElboTerms {
  double total = 0.0;
  double reconstruction = 0.0;
  double discrete_kl = 0.0;
  double continuous_kl = 0.0;
};

/// Negative ELBO as a tape scalar (the training loss). One reparameterized
/// draw per (sequence, timestep) comes in through eps_draws (T x K each).
/// Timesteps t < max(lags) use the standard-normal initial prior. Masked
/// entries contribute nothing to the reconstruction term. Throws on a
/// non-finite term, naming the sequence and timestep.
ad::Var elbo_loss(ad::Tape& tape, const Model& model, const ad::ParamStore& phi,
                  const std::vector<data::Sequence>& seqs,
                  const std::vector<Eigen::MatrixXd>& eps_draws, ElboTerms* terms = nullptr);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> loss_trace;  ///< monotone (running best) trace
  std::vector<double> raw_trace;   ///< per-epoch loss as observed
};

/// Joint gradient ascent on the ELBO over (theta, phi) with Adam; the state
/// posteriors are recomputed from the Bayes rule inside every step.
/// Deterministic given config().seed.
TrainResult train(Model& model, ad::ParamStore& phi, const std::vector<data::Sequence>& seqs);

// ---------------------------------------------------------------------------
// Test-time inference and rolling prediction
// ---------------------------------------------------------------------------

/// Filtered variational state over the processed prefix of a test sequence.
struct FilterState {
  std::vector<Eigen::VectorXd> z_mean;
  std::vector<Eigen::VectorXd> z_sigma;
  std::vector<Eigen::VectorXd> q;  ///< state posterior per processed timestep

  int size() const { return static_cast<int>(z_mean.size()); }
};

/// Optimizes the new timestep's variational parameters only (theta frozen),
/// initialized at the prior transition mean under the most probable state,
/// then appends the timestep (including its Bayes state posterior) to the
/// filter state.
void infer_step(const Model& model, FilterState& state, const Eigen::VectorXd& x_row,
                const std::vector<bool>& observed, Rng& rng);

struct RollingResult {
  Eigen::MatrixXd predictions;   ///< T x 3D; rows before `warmup` are filtered reconstructions
  Eigen::MatrixXd pred_sigma;    ///< predictive std per entry (first-order propagation)
  Eigen::MatrixXd q_states;      ///< T x S inferred state posteriors
  Eigen::VectorXi state_argmax;  ///< argmax of q_states per timestep
  int warmup = 0;                ///< leading timesteps without a true prediction
};

/// One-step-ahead predictions across a test sequence: predict x_hat_{t} from
/// the filtered past, then run inference on the true x_t before moving on.
/// The generative model stays fixed throughout. Works in the normalized data
/// scale. Deterministic given the seed.
RollingResult rolling_predict(const Model& model, const data::Sequence& test, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Writes theta plus "config.*" and "transform.*" records into the flat
/// checkpoint container.
void save_checkpoint(const Model& model, const data::ScaleTransform& transform,
                     const std::string& path);

struct LoadedCheckpoint {
  ModelConfig config;
  data::ScaleTransform transform;
  // Model is reconstructed from config and then overwritten with the stored
  // values, so mismatching architectures fail loudly.
};

std::pair<Model, data::ScaleTransform> load_checkpoint(const std::string& path);

}  // namespace eqddm::ssm
