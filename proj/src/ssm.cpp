#include "eqddm/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace eqddm::ssm {

namespace {

double inv_softplus(double y) {
  // inverse of log1p(exp(x)); y must be positive
  if (y <= 0.0) throw std::invalid_argument("inv_softplus: argument must be positive");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

double plain_softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double gauss_logpdf_plain(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                          const Eigen::VectorXd& sigma) {
  const Eigen::ArrayXd z = (x - mu).array() / sigma.array();
  return -0.5 * (z * z).sum() - sigma.array().log().sum() -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * M_PI);
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index idx = 0;
  v.maxCoeff(&idx);
  return static_cast<int>(idx);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

int ModelConfig::max_lag() const {
  int m = 0;
  for (int l : lags) m = std::max(m, l);
  return m;
}

lie::RepSignature ModelConfig::effective_latent_signature() const {
  if (!latent_signature.terms.empty()) return latent_signature;
  if (K % 3 != 0)
    throw std::invalid_argument(
        "ModelConfig: K not divisible by 3 requires an explicit latent_signature with rank-0 "
        "padding");
  return lie::RepSignature{{K / 3, 1}};
}

lie::RepSignature ModelConfig::obs_signature() const { return lie::RepSignature{{D, 1}}; }

void ModelConfig::validate() const {
  if (S < 1) throw std::invalid_argument("ModelConfig: S must be >= 1");
  if (K < 1) throw std::invalid_argument("ModelConfig: K must be >= 1");
  if (D < 1) throw std::invalid_argument("ModelConfig: D must be >= 1");
  if (lags.empty()) throw std::invalid_argument("ModelConfig: need at least one lag");
  for (int l : lags)
    if (l < 1) throw std::invalid_argument("ModelConfig: lags must be positive");
  if (sigma_x <= 0.0) throw std::invalid_argument("ModelConfig: sigma_x must be positive");
  if (lr <= 0.0) throw std::invalid_argument("ModelConfig: lr must be positive");
  if (epochs < 0) throw std::invalid_argument("ModelConfig: epochs must be >= 0");
  if (infer_steps < 0) throw std::invalid_argument("ModelConfig: infer_steps must be >= 0");
  const auto sig = effective_latent_signature();
  if (sig.size(3) != K)
    throw std::invalid_argument("ModelConfig: latent_signature size does not equal K");
}

void ModelConfig::apply_key(const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_double = [&] { return std::stod(value); };
  auto as_bool = [&] {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw std::invalid_argument("config: boolean key '" + key + "' expects 0/1/true/false");
  };
  if (key == "S") S = as_int();
  else if (key == "K") K = as_int();
  else if (key == "D") D = as_int();
  else if (key == "lags") {
    lags.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) lags.push_back(std::stoi(item));
  } else if (key == "sigma_x") sigma_x = as_double();
  else if (key == "sigma_x_trainable") sigma_x_trainable = as_bool();
  else if (key == "lr") lr = as_double();
  else if (key == "epochs") epochs = as_int();
  else if (key == "seed") seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "infer_steps") infer_steps = as_int();
  else if (key == "ablation") ablation = as_bool();
  else if (key == "pi_width_mult") pi_width_mult = as_int();
  else if (key == "trans_width_mult") trans_width_mult = as_int();
  else if (key == "emis_width_mult") emis_width_mult = as_int();
  else if (key == "latent_signature") latent_signature = lie::RepSignature::parse(value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ModelConfig ModelConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  ModelConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(line_no) + " is not key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    try {
      cfg.apply_key(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw std::runtime_error("config: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

std::string ModelConfig::describe() const {
  std::ostringstream out;
  out << "S=" << S << " K=" << K << " D=" << D << " lags=";
  for (size_t i = 0; i < lags.size(); ++i) out << (i ? "," : "") << lags[i];
  out << " sigma_x=" << sigma_x << (sigma_x_trainable ? " (trainable)" : "")
      << " lr=" << lr << " epochs=" << epochs << " seed=" << seed
      << " infer_steps=" << infer_steps << (ablation ? " ablation" : "")
      << " latent=" << effective_latent_signature().to_string();
  return out.str();
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const lie::MatrixGroup group = lie::MatrixGroup::so(3);
  Rng rng(cfg_.seed);

  const lie::RepSignature z_sig = cfg_.effective_latent_signature();
  const lie::RepSignature x_sig = cfg_.obs_signature();
  const int K = cfg_.K;
  const lie::RepSignature h_em = eqv::hidden_signature(cfg_.emis_width_mult * K, 3);
  const lie::RepSignature h_pi = eqv::hidden_signature(cfg_.pi_width_mult * K, 3);
  const lie::RepSignature h_tr = eqv::hidden_signature(cfg_.trans_width_mult * K, 3);
  const lie::RepSignature s_out{{cfg_.S, 0}};
  const lie::RepSignature k_scalars{{K, 0}};

  {
    eqv::NetworkSpec spec;
    spec.ablation = cfg_.ablation;
    spec.tail_layers = {{z_sig, h_em, true},
                        {h_em, h_em, true},
                        {h_em, h_em, true},
                        {h_em, x_sig, false}};
    emission_ = eqv::Network::build(group, spec, "theta.emission", theta_, rng);
  }

  for (int s = 0; s < cfg_.S; ++s) {
    const std::string tag = ".s" + std::to_string(s);
    {
      eqv::NetworkSpec spec;
      spec.ablation = cfg_.ablation;
      spec.tail_layers = {{z_sig, h_pi, true}, {h_pi, h_pi, true}, {h_pi, s_out, false}};
      spec.softmax_head = true;
      pi_.push_back(eqv::Network::build(group, spec, "theta.pi" + tag, theta_, rng));
    }
    {
      eqv::NetworkSpec spec;
      spec.ablation = cfg_.ablation;
      spec.n_streams = static_cast<int>(cfg_.lags.size());
      spec.stream_layers = {{z_sig, h_tr, true}, {h_tr, h_tr, true}};
      spec.tail_layers = {{h_tr, h_tr, true}};
      trans_trunk_.push_back(eqv::Network::build(group, spec, "theta.trans" + tag, theta_, rng));
    }
    {
      eqv::NetworkSpec spec;
      spec.ablation = cfg_.ablation;
      spec.tail_layers = {{h_tr, z_sig, false}};
      trans_mean_.push_back(eqv::Network::build(group, spec, "theta.trans_mean" + tag, theta_, rng));
    }
    {
      eqv::NetworkSpec spec;
      spec.ablation = cfg_.ablation;
      spec.tail_layers = {{h_tr, k_scalars, false}};
      trans_sigma_.push_back(
          eqv::Network::build(group, spec, "theta.trans_sigma" + tag, theta_, rng));
    }
  }

  if (cfg_.sigma_x_trainable) {
    Eigen::MatrixXd raw(1, 1);
    raw(0, 0) = inv_softplus(std::max(cfg_.sigma_x - kSigmaFloor, 1e-6));
    theta_.create("theta.sigma_x_raw", raw);
  }

  const eqv::SignatureLayout z_layout = eqv::SignatureLayout::of(z_sig, 3);
  sigma_block_pool_ = Eigen::MatrixXd::Zero(K, K);
  for (int i = 0; i < z_layout.scalar_count; ++i) sigma_block_pool_(i, i) = 1.0;
  for (const auto& [off, size] : z_layout.blocks)
    sigma_block_pool_.block(off, off, size, size).setConstant(1.0 / size);
}

int Model::free_parameter_count() const { return theta_.total_size(); }

ad::Var Model::emission_mean(ad::Tape& tape, ad::Var z) const {
  return emission_.forward(tape, theta_, z);
}

std::pair<ad::Var, ad::Var> Model::transition(ad::Tape& tape, int s,
                                              const std::vector<ad::Var>& z_hist) const {
  if (s < 0 || s >= cfg_.S) throw std::invalid_argument("transition: state index out of range");
  if (z_hist.size() != cfg_.lags.size())
    throw std::invalid_argument("transition: expected one history entry per lag");
  const ad::Var hidden = trans_trunk_[s].forward(tape, theta_, z_hist);
  const ad::Var mean = trans_mean_[s].forward(tape, theta_, hidden);
  const ad::Var pre = tape.matmul(tape.constant(sigma_block_pool_),
                                  trans_sigma_[s].forward(tape, theta_, hidden));
  const ad::Var sigma = tape.add_scalar(tape.softplus(pre), kSigmaFloor);
  return {mean, sigma};
}

ad::Var Model::switch_probs(ad::Tape& tape, int s_prev, ad::Var z_prev) const {
  if (s_prev < 0 || s_prev >= cfg_.S)
    throw std::invalid_argument("switch_probs: state index out of range");
  return pi_[s_prev].forward(tape, theta_, z_prev);
}

ad::Var Model::sigma_x(ad::Tape& tape) const {
  if (cfg_.sigma_x_trainable)
    return tape.add_scalar(tape.softplus(tape.param(theta_, "theta.sigma_x_raw")), kSigmaFloor);
  return tape.constant_scalar(cfg_.sigma_x);
}

Eigen::VectorXd Model::emission_mean(const Eigen::VectorXd& z) const {
  return emission_.forward_plain(theta_, z);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> Model::transition(
    int s, const std::vector<Eigen::VectorXd>& z_hist) const {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(z_hist.size());
  for (const auto& z : z_hist) vars.push_back(tape.constant(z));
  const auto [mean, sigma] = transition(tape, s, vars);
  return {tape.value(mean), tape.value(sigma)};
}

Eigen::VectorXd Model::switch_probs(int s_prev, const Eigen::VectorXd& z_prev) const {
  ad::Tape tape;
  return tape.value(switch_probs(tape, s_prev, tape.constant(z_prev)));
}

double Model::sigma_x_value() const {
  if (cfg_.sigma_x_trainable)
    return plain_softplus(theta_.value("theta.sigma_x_raw")(0, 0)) + kSigmaFloor;
  return cfg_.sigma_x;
}

Eigen::MatrixXd Model::emission_jacobian(const Eigen::VectorXd& z) const {
  ad::Tape tape;
  const ad::Var zin = tape.input(z);
  const ad::Var out = emission_mean(tape, zin);
  const int rows = static_cast<int>(tape.value(out).rows());
  Eigen::MatrixXd jac(rows, z.size());
  for (int i = 0; i < rows; ++i) {
    tape.backward(tape.slice_rows(out, i, 1));
    jac.row(i) = tape.grad(zin).col(0).transpose();
  }
  return jac;
}

Eigen::VectorXd Model::q_state_posterior(const Eigen::VectorXd& q_prev,
                                         const Eigen::VectorXd& z_prev,
                                         const Eigen::VectorXd& z_t,
                                         const std::vector<Eigen::VectorXd>& z_hist) const {
  const int S = cfg_.S;
  Eigen::VectorXd prior = Eigen::VectorXd::Zero(S);
  for (int s_prev = 0; s_prev < S; ++s_prev)
    prior += q_prev[s_prev] * switch_probs(s_prev, z_prev);
  Eigen::VectorXd logpost(S);
  for (int s = 0; s < S; ++s) {
    const auto [mean, sigma] = transition(s, z_hist);
    logpost[s] = std::log(std::max(prior[s], 1e-300)) + gauss_logpdf_plain(z_t, mean, sigma);
  }
  const double m = logpost.maxCoeff();
  if (!std::isfinite(m)) {
    std::cerr << "[eqddm] q_state_posterior: posterior mass underflowed; falling back to the prior\n";
    return prior / prior.sum();
  }
  Eigen::VectorXd w = (logpost.array() - m).exp();
  return w / w.sum();
}

Model build_ablation(ModelConfig cfg) {
  cfg.ablation = true;
  return Model(cfg);
}

// ---------------------------------------------------------------------------
// Variational parameters and the ELBO
// ---------------------------------------------------------------------------

std::string phi_mu_name(int seq_index, int t) {
  return "phi.n" + std::to_string(seq_index) + ".t" + std::to_string(t) + ".mu";
}

std::string phi_rho_name(int seq_index, int t) {
  return "phi.n" + std::to_string(seq_index) + ".t" + std::to_string(t) + ".rho";
}

void init_variational_params(const Model& model, const std::vector<data::Sequence>& seqs,
                             ad::ParamStore& phi, Rng& rng) {
  const int K = model.config().K;
  const double rho0 = inv_softplus(0.5 - kSigmaFloor);
  for (size_t n = 0; n < seqs.size(); ++n)
    for (int t = 0; t < seqs[n].timesteps(); ++t) {
      phi.create(phi_mu_name(static_cast<int>(n), t), 0.1 * rng.normal_vector(K));
      phi.create(phi_rho_name(static_cast<int>(n), t),
                 Eigen::MatrixXd::Constant(K, 1, rho0));
    }
}

namespace {

struct SeqElbo {
  ad::Var recon, dkl, ckl;
};

}  // namespace

ad::Var elbo_loss(ad::Tape& tape, const Model& model, const ad::ParamStore& phi,
                  const std::vector<data::Sequence>& seqs,
                  const std::vector<Eigen::MatrixXd>& eps_draws, ElboTerms* terms) {
  const ModelConfig& cfg = model.config();
  const int S = cfg.S;
  const int K = cfg.K;
  const int maxl = cfg.max_lag();
  if (eps_draws.size() != seqs.size())
    throw std::invalid_argument("elbo_loss: need one noise matrix per sequence");

  const ad::Var sx = model.sigma_x(tape);
  const ad::Var log_sx = tape.log(sx);
  const ad::Var sx2 = tape.mul(sx, sx);
  const Eigen::VectorXd uniform_s = Eigen::VectorXd::Constant(S, 1.0 / S);

  ad::Var recon_total, dkl_total, ckl_total;
  bool first = true;

  for (size_t n = 0; n < seqs.size(); ++n) {
    const data::Sequence& seq = seqs[n];
    const int T = seq.timesteps();
    if (eps_draws[n].rows() != T || eps_draws[n].cols() != K)
      throw std::invalid_argument("elbo_loss: noise matrix shape mismatch for sequence " +
                                  std::to_string(n));
    if (T < maxl + 1)
      throw std::invalid_argument("elbo_loss: sequence " + std::to_string(n) +
                                  " shorter than max lag + 1");

    std::vector<ad::Var> mu(T), sigma(T), z(T);
    for (int t = 0; t < T; ++t) {
      mu[t] = tape.param(phi, phi_mu_name(static_cast<int>(n), t));
      const ad::Var rho = tape.param(phi, phi_rho_name(static_cast<int>(n), t));
      sigma[t] = tape.add_scalar(tape.softplus(rho), kSigmaFloor);
      z[t] = tape.reparam_sample(mu[t], sigma[t], eps_draws[n].row(t).transpose());
    }

    ad::Var q_prev;
    for (int t = 0; t < T; ++t) {
      // reconstruction (masked)
      Eigen::VectorXd x_row = Eigen::VectorXd::Zero(seq.dims());
      Eigen::VectorXd mask_row = Eigen::VectorXd::Zero(seq.dims());
      int n_obs = 0;
      for (int c = 0; c < seq.dims(); ++c)
        if (seq.mask(t, c)) {
          x_row[c] = seq.values(t, c);
          mask_row[c] = 1.0;
          ++n_obs;
        }
      const ad::Var xhat = model.emission_mean(tape, z[t]);
      const ad::Var diff = tape.mul(tape.sub(tape.constant(x_row), xhat), tape.constant(mask_row));
      const ad::Var quad = tape.sum(tape.mul(diff, diff));
      ad::Var recon_t = tape.scale(tape.cw_quotient(quad, sx2), 0.5);
      if (n_obs > 0)
        recon_t = tape.add(recon_t,
                           tape.add_scalar(tape.scale(log_sx, static_cast<double>(n_obs)),
                                           0.5 * n_obs * std::log(2.0 * M_PI)));

      // state prior for this step and per-(s_prev) switch distributions
      std::vector<ad::Var> pis;
      ad::Var prior_s;
      if (t == 0) {
        prior_s = tape.constant(uniform_s);
      } else {
        for (int sp = 0; sp < S; ++sp) pis.push_back(model.switch_probs(tape, sp, z[t - 1]));
        for (int sp = 0; sp < S; ++sp) {
          const ad::Var weighted = tape.matmul(pis[sp], tape.slice_rows(q_prev, sp, 1));
          prior_s = sp == 0 ? weighted : tape.add(prior_s, weighted);
        }
      }

      // q(s_t) and the continuous KL
      ad::Var q_t, ckl_t;
      if (t < maxl) {
        q_t = prior_s;  // likelihood is state-independent under the initial prior
        ckl_t = tape.kl_gauss(mu[t], sigma[t], tape.constant(Eigen::VectorXd::Zero(K)),
                              tape.constant(Eigen::VectorXd::Ones(K)));
      } else {
        std::vector<ad::Var> hist;
        for (int lag : cfg.lags) hist.push_back(z[t - lag]);
        std::vector<ad::Var> trans_mean(S), trans_sigma(S), loglik(S);
        for (int s = 0; s < S; ++s) {
          std::tie(trans_mean[s], trans_sigma[s]) = model.transition(tape, s, hist);
          loglik[s] = tape.gauss_logpdf(z[t], trans_mean[s], trans_sigma[s]);
        }
        const ad::Var logpost = tape.add(tape.log(prior_s), tape.vstack(loglik));
        if (!tape.value(logpost).allFinite()) {
          std::cerr << "[eqddm] elbo: state posterior underflow at sequence " << n
                    << " timestep " << t << "; falling back to the prior\n";
          q_t = prior_s;
        } else {
          q_t = tape.softmax(logpost);
        }
        for (int s = 0; s < S; ++s) {
          const ad::Var kl_s = tape.kl_gauss(mu[t], sigma[t], trans_mean[s], trans_sigma[s]);
          const ad::Var weighted = tape.mul(tape.slice_rows(q_t, s, 1), kl_s);
          ckl_t = s == 0 ? weighted : tape.add(ckl_t, weighted);
        }
      }

      // discrete KL, enumerating the previous state
      ad::Var dkl_t;
      if (t == 0) {
        dkl_t = tape.kl_cat(q_t, tape.constant(uniform_s));
      } else {
        for (int sp = 0; sp < S; ++sp) {
          const ad::Var kl_sp = tape.kl_cat(q_t, pis[sp]);
          const ad::Var weighted = tape.mul(tape.slice_rows(q_prev, sp, 1), kl_sp);
          dkl_t = sp == 0 ? weighted : tape.add(dkl_t, weighted);
        }
      }

      const double rv = tape.value(recon_t)(0, 0);
      const double dv = tape.value(dkl_t)(0, 0);
      const double cv = tape.value(ckl_t)(0, 0);
      if (!std::isfinite(rv) || !std::isfinite(dv) || !std::isfinite(cv))
        throw std::runtime_error("elbo: non-finite loss term at sequence " + std::to_string(n) +
                                 " timestep " + std::to_string(t));

      if (first) {
        recon_total = recon_t;
        dkl_total = dkl_t;
        ckl_total = ckl_t;
        first = false;
      } else {
        recon_total = tape.add(recon_total, recon_t);
        dkl_total = tape.add(dkl_total, dkl_t);
        ckl_total = tape.add(ckl_total, ckl_t);
      }
      q_prev = q_t;
    }
  }

  const ad::Var loss = tape.add(recon_total, tape.add(dkl_total, ckl_total));
  if (terms) {
    terms->reconstruction = tape.value(recon_total)(0, 0);
    terms->discrete_kl = tape.value(dkl_total)(0, 0);
    terms->continuous_kl = tape.value(ckl_total)(0, 0);
    terms->total = tape.value(loss)(0, 0);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult train(Model& model, ad::ParamStore& phi, const std::vector<data::Sequence>& seqs) {
  const ModelConfig& cfg = model.config();
  if (seqs.empty()) throw std::invalid_argument("train: no sequences");
  for (const auto& seq : seqs)
    if (seq.timesteps() <= cfg.max_lag())
      throw std::invalid_argument("train: sequence '" + seq.name + "' shorter than max lag + 1");

  TrainResult result;
  Rng eps_rng(mix_seed(cfg.seed, 2));
  const ad::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  double best = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Tape tape;
    std::vector<Eigen::MatrixXd> eps;
    eps.reserve(seqs.size());
    for (const auto& seq : seqs) eps.push_back(eps_rng.normal_matrix(seq.timesteps(), cfg.K));

    ElboTerms terms;
    const ad::Var loss = elbo_loss(tape, model, phi, seqs, eps, &terms);
    tape.backward(loss);
    auto grads = tape.param_grads();

    std::map<std::string, Eigen::MatrixXd> theta_grads, phi_grads;
    for (auto& [name, g] : grads) {
      if (name.rfind("theta.", 0) == 0)
        theta_grads.emplace(name, std::move(g));
      else
        phi_grads.emplace(name, std::move(g));
    }
    model.params().adam_step(theta_grads, adam);
    phi.adam_step(phi_grads, adam);

    best = std::min(best, terms.total);
    result.raw_trace.push_back(terms.total);
    result.loss_trace.push_back(best);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Test-time inference
// ---------------------------------------------------------------------------

namespace {

/// Loss slice for one new timestep: masked reconstruction, the discrete KL
/// given the filtered q over the previous state, and the continuous KL
/// against the per-state transition priors (or the standard-normal prior in
/// the warmup region).
ad::Var slice_loss(ad::Tape& tape, const Model& model, const ad::ParamStore& local,
                   const FilterState& state, const Eigen::VectorXd& x_row,
                   const Eigen::VectorXd& mask_row, int n_obs, Rng& rng) {
  const ModelConfig& cfg = model.config();
  const int S = cfg.S;
  const int K = cfg.K;
  const int t = state.size();
  const int maxl = cfg.max_lag();

  const ad::Var mu = tape.param(local, "mu");
  const ad::Var sigma = tape.add_scalar(tape.softplus(tape.param(local, "rho")), kSigmaFloor);
  const ad::Var z_t = tape.reparam_sample(mu, sigma, rng.normal_vector(K));

  // condition on the filtered point estimates of the frozen past; re-sampling
  // the history every step only adds variance to the slice objective
  auto past_sample = [&](int idx) -> Eigen::VectorXd { return state.z_mean[idx]; };

  const ad::Var sx = model.sigma_x(tape);
  const ad::Var xhat = model.emission_mean(tape, z_t);
  const ad::Var diff = tape.mul(tape.sub(tape.constant(x_row), xhat), tape.constant(mask_row));
  const ad::Var quad = tape.sum(tape.mul(diff, diff));
  ad::Var loss = tape.scale(tape.cw_quotient(quad, tape.mul(sx, sx)), 0.5);
  if (n_obs > 0)
    loss = tape.add(loss, tape.add_scalar(tape.scale(tape.log(sx), static_cast<double>(n_obs)),
                                          0.5 * n_obs * std::log(2.0 * M_PI)));

  const Eigen::VectorXd uniform_s = Eigen::VectorXd::Constant(S, 1.0 / S);
  std::vector<ad::Var> pis;
  ad::Var prior_s;
  ad::Var z_prev;
  if (t > 0) {
    z_prev = tape.constant(past_sample(t - 1));
    for (int sp = 0; sp < S; ++sp) pis.push_back(model.switch_probs(tape, sp, z_prev));
    for (int sp = 0; sp < S; ++sp) {
      const ad::Var weighted =
          tape.matmul(pis[sp], tape.constant_scalar(state.q[t - 1][sp]));
      prior_s = sp == 0 ? weighted : tape.add(prior_s, weighted);
    }
  } else {
    prior_s = tape.constant(uniform_s);
  }

  ad::Var q_t, ckl_t;
  if (t < maxl) {
    q_t = prior_s;
    ckl_t = tape.kl_gauss(mu, sigma, tape.constant(Eigen::VectorXd::Zero(K)),
                          tape.constant(Eigen::VectorXd::Ones(K)));
  } else {
    std::vector<ad::Var> hist;
    for (int lag : cfg.lags) hist.push_back(tape.constant(past_sample(t - lag)));
    std::vector<ad::Var> means(S), sigmas(S), loglik(S);
    for (int s = 0; s < S; ++s) {
      std::tie(means[s], sigmas[s]) = model.transition(tape, s, hist);
      loglik[s] = tape.gauss_logpdf(z_t, means[s], sigmas[s]);
    }
    const ad::Var logpost = tape.add(tape.log(prior_s), tape.vstack(loglik));
    q_t = tape.value(logpost).allFinite() ? tape.softmax(logpost) : prior_s;
    for (int s = 0; s < S; ++s) {
      const ad::Var kl_s = tape.kl_gauss(mu, sigma, means[s], sigmas[s]);
      const ad::Var weighted = tape.mul(tape.slice_rows(q_t, s, 1), kl_s);
      ckl_t = s == 0 ? weighted : tape.add(ckl_t, weighted);
    }
  }
  loss = tape.add(loss, ckl_t);

  if (t == 0) {
    loss = tape.add(loss, tape.kl_cat(q_t, tape.constant(uniform_s)));
  } else {
    ad::Var dkl_t;
    for (int sp = 0; sp < S; ++sp) {
      const ad::Var kl_sp = tape.kl_cat(q_t, pis[sp]);
      const ad::Var weighted = tape.mul(tape.constant_scalar(state.q[t - 1][sp]), kl_sp);
      dkl_t = sp == 0 ? weighted : tape.add(dkl_t, weighted);
    }
    loss = tape.add(loss, dkl_t);
  }
  return loss;
}

}  // namespace

void infer_step(const Model& model, FilterState& state, const Eigen::VectorXd& x_row,
                const std::vector<bool>& observed, Rng& rng) {
  const ModelConfig& cfg = model.config();
  const int K = cfg.K;
  const int t = state.size();
  const int maxl = cfg.max_lag();
  if (static_cast<int>(observed.size()) != x_row.size())
    throw std::invalid_argument("infer_step: mask length mismatch");

  Eigen::VectorXd mu0, sigma0;
  if (t >= maxl) {
    const int s_prev = argmax(state.q[t - 1]);
    const Eigen::VectorXd pi = model.switch_probs(s_prev, state.z_mean[t - 1]);
    const int s_hat = argmax(pi);
    std::vector<Eigen::VectorXd> hist;
    for (int lag : cfg.lags) hist.push_back(state.z_mean[t - lag]);
    std::tie(mu0, sigma0) = model.transition(s_hat, hist);
  } else {
    // warmup: anchor with a least-squares inversion of the emission around 0
    const Eigen::MatrixXd jac = model.emission_jacobian(Eigen::VectorXd::Zero(K));
    int n_obs = 0;
    for (bool b : observed) n_obs += b ? 1 : 0;
    if (n_obs > 0) {
      Eigen::MatrixXd jac_obs(n_obs, K);
      Eigen::VectorXd x_obs(n_obs);
      int r = 0;
      for (int c = 0; c < x_row.size(); ++c)
        if (observed[c]) {
          jac_obs.row(r) = jac.row(c);
          x_obs[r] = x_row[c] - model.emission_mean(Eigen::VectorXd::Zero(K))[c];
          ++r;
        }
      mu0 = jac_obs.completeOrthogonalDecomposition().solve(x_obs);
    } else {
      mu0 = Eigen::VectorXd::Zero(K);
    }
    sigma0 = Eigen::VectorXd::Constant(K, 0.5);
  }

  Eigen::VectorXd mask_row = Eigen::VectorXd::Zero(x_row.size());
  Eigen::VectorXd x_masked = Eigen::VectorXd::Zero(x_row.size());
  int n_obs = 0;
  for (int c = 0; c < x_row.size(); ++c)
    if (observed[c]) {
      mask_row[c] = 1.0;
      x_masked[c] = x_row[c];
      ++n_obs;
    }

  // calibrate the initial posterior width: combine the prior information
  // with the observed coordinates' information at the linearization point,
  // so well-observed latent directions start at the measurement scale and
  // unobserved ones keep the prior width
  if (n_obs > 0) {
    const double sx = model.sigma_x_value();
    const Eigen::MatrixXd jac = model.emission_jacobian(mu0);
    for (int k = 0; k < K; ++k) {
      double info = 1.0 / (sigma0[k] * sigma0[k]);
      for (int c = 0; c < x_row.size(); ++c)
        if (observed[c]) info += jac(c, k) * jac(c, k) / (sx * sx);
      sigma0[k] = 1.0 / std::sqrt(info);
    }
  }

  ad::ParamStore local;
  local.create("mu", mu0);
  Eigen::VectorXd rho0(K);
  for (int k = 0; k < K; ++k) rho0[k] = inv_softplus(std::max(sigma0[k] - kSigmaFloor, 1e-6));
  local.create("rho", rho0);

  const ad::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  // Polyak tail average: the single-sample objective keeps the iterates
  // dithering at the noise scale, so the estimate is the mean of the last
  // fifth of the trajectory rather than the final iterate.
  const int tail = std::max(1, cfg.infer_steps / 5);
  Eigen::VectorXd mu_acc = Eigen::VectorXd::Zero(K);
  Eigen::VectorXd rho_acc = Eigen::VectorXd::Zero(K);
  int averaged = 0;
  for (int step = 0; step < cfg.infer_steps; ++step) {
    ad::Tape tape;
    const ad::Var loss = slice_loss(tape, model, local, state, x_masked, mask_row, n_obs, rng);
    tape.backward(loss);
    // theta stays frozen; only this timestep's variational parameters move
    auto all_grads = tape.param_grads();
    std::map<std::string, Eigen::MatrixXd> grads;
    for (auto& [name, g] : all_grads)
      if (name == "mu" || name == "rho") grads.emplace(name, std::move(g));
    local.adam_step(grads, adam);
    if (step >= cfg.infer_steps - tail) {
      mu_acc += local.value("mu").col(0);
      rho_acc += local.value("rho").col(0);
      ++averaged;
    }
  }
  if (averaged == 0) {
    mu_acc = local.value("mu").col(0);
    rho_acc = local.value("rho").col(0);
    averaged = 1;
  }

  const Eigen::VectorXd mu = mu_acc / averaged;
  Eigen::VectorXd sigma(K);
  for (int k = 0; k < K; ++k) sigma[k] = plain_softplus(rho_acc[k] / averaged) + kSigmaFloor;

  Eigen::VectorXd q_t;
  if (t == 0) {
    q_t = Eigen::VectorXd::Constant(cfg.S, 1.0 / cfg.S);
  } else if (t < maxl) {
    Eigen::VectorXd prior = Eigen::VectorXd::Zero(cfg.S);
    for (int sp = 0; sp < cfg.S; ++sp)
      prior += state.q[t - 1][sp] * model.switch_probs(sp, state.z_mean[t - 1]);
    q_t = prior;
  } else {
    std::vector<Eigen::VectorXd> hist;
    for (int lag : cfg.lags) hist.push_back(state.z_mean[t - lag]);
    q_t = model.q_state_posterior(state.q[t - 1], state.z_mean[t - 1], mu, hist);
  }

  state.z_mean.push_back(mu);
  state.z_sigma.push_back(sigma);
  state.q.push_back(q_t);
}

RollingResult rolling_predict(const Model& model, const data::Sequence& test,
                              std::uint64_t seed) {
  const ModelConfig& cfg = model.config();
  const int T = test.timesteps();
  const int maxl = cfg.max_lag();
  if (T <= maxl)
    throw std::invalid_argument("rolling_predict: test sequence must be longer than max lag");
  if (test.dims() != 3 * cfg.D)
    throw std::invalid_argument("rolling_predict: sequence width does not match 3*D");

  RollingResult res;
  res.warmup = maxl;
  res.predictions = Eigen::MatrixXd::Zero(T, test.dims());
  res.pred_sigma = Eigen::MatrixXd::Zero(T, test.dims());
  res.q_states = Eigen::MatrixXd::Zero(T, cfg.S);
  res.state_argmax = Eigen::VectorXi::Zero(T);

  FilterState state;
  const double sx = model.sigma_x_value();

  for (int t = 0; t < T; ++t) {
    if (t >= maxl) {
      // predict before looking at x_t
      const int s_prev = argmax(state.q[t - 1]);
      const Eigen::VectorXd pi = model.switch_probs(s_prev, state.z_mean[t - 1]);
      const int s_hat = argmax(pi);
      std::vector<Eigen::VectorXd> hist;
      for (int lag : cfg.lags) hist.push_back(state.z_mean[t - lag]);
      const auto [z_hat, z_sd] = model.transition(s_hat, hist);
      res.predictions.row(t) = model.emission_mean(z_hat).transpose();
      const Eigen::MatrixXd jac = model.emission_jacobian(z_hat);
      for (int c = 0; c < test.dims(); ++c)
        res.pred_sigma(t, c) =
            std::sqrt(sx * sx + (jac.row(c).transpose().array().square() *
                                 z_sd.array().square()).sum());
    }

    Rng step_rng(mix_seed(seed, 100 + static_cast<std::uint64_t>(t)));
    std::vector<bool> observed(test.dims());
    for (int c = 0; c < test.dims(); ++c) observed[c] = test.mask(t, c);
    infer_step(model, state, test.values.row(t).transpose(), observed, step_rng);

    if (t < maxl) {
      // no true prediction yet; report the filtered reconstruction
      res.predictions.row(t) = model.emission_mean(state.z_mean[t]).transpose();
      const Eigen::MatrixXd jac = model.emission_jacobian(state.z_mean[t]);
      for (int c = 0; c < test.dims(); ++c)
        res.pred_sigma(t, c) =
            std::sqrt(sx * sx + (jac.row(c).transpose().array().square() *
                                 state.z_sigma[t].array().square()).sum());
    }

    res.q_states.row(t) = state.q[t].transpose();
    res.state_argmax[t] = argmax(state.q[t]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd scalar_mat(double x) {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = x;
  return m;
}

}  // namespace

void save_checkpoint(const Model& model, const data::ScaleTransform& transform,
                     const std::string& path) {
  const ModelConfig& cfg = model.config();
  ad::ParamStore out;
  for (const auto& name : model.params().names()) out.create(name, model.params().value(name));
  out.create("config.S", scalar_mat(cfg.S));
  out.create("config.K", scalar_mat(cfg.K));
  out.create("config.D", scalar_mat(cfg.D));
  Eigen::MatrixXd lags(cfg.lags.size(), 1);
  for (size_t i = 0; i < cfg.lags.size(); ++i) lags(i, 0) = cfg.lags[i];
  out.create("config.lags", lags);
  out.create("config.sigma_x", scalar_mat(cfg.sigma_x));
  out.create("config.sigma_x_trainable", scalar_mat(cfg.sigma_x_trainable ? 1.0 : 0.0));
  out.create("config.lr", scalar_mat(cfg.lr));
  out.create("config.epochs", scalar_mat(cfg.epochs));
  out.create("config.seed", scalar_mat(static_cast<double>(cfg.seed)));
  out.create("config.infer_steps", scalar_mat(cfg.infer_steps));
  out.create("config.ablation", scalar_mat(cfg.ablation ? 1.0 : 0.0));
  out.create("config.pi_width_mult", scalar_mat(cfg.pi_width_mult));
  out.create("config.trans_width_mult", scalar_mat(cfg.trans_width_mult));
  out.create("config.emis_width_mult", scalar_mat(cfg.emis_width_mult));
  const lie::RepSignature sig = cfg.effective_latent_signature();
  Eigen::MatrixXd sig_mat(sig.terms.size(), 2);
  for (size_t i = 0; i < sig.terms.size(); ++i) {
    sig_mat(i, 0) = sig.terms[i].first;
    sig_mat(i, 1) = sig.terms[i].second;
  }
  out.create("config.latent_signature", sig_mat);
  out.create("transform.scale", scalar_mat(transform.scale));
  out.create("transform.offset", transform.offset);
  out.save(path);
}

std::pair<Model, data::ScaleTransform> load_checkpoint(const std::string& path) {
  const ad::ParamStore in = ad::ParamStore::load(path);
  ModelConfig cfg;
  cfg.S = static_cast<int>(in.value("config.S")(0, 0));
  cfg.K = static_cast<int>(in.value("config.K")(0, 0));
  cfg.D = static_cast<int>(in.value("config.D")(0, 0));
  cfg.lags.clear();
  const Eigen::MatrixXd lags = in.value("config.lags");
  for (Eigen::Index i = 0; i < lags.rows(); ++i) cfg.lags.push_back(static_cast<int>(lags(i, 0)));
  cfg.sigma_x = in.value("config.sigma_x")(0, 0);
  cfg.sigma_x_trainable = in.value("config.sigma_x_trainable")(0, 0) != 0.0;
  cfg.lr = in.value("config.lr")(0, 0);
  cfg.epochs = static_cast<int>(in.value("config.epochs")(0, 0));
  cfg.seed = static_cast<std::uint64_t>(in.value("config.seed")(0, 0));
  cfg.infer_steps = static_cast<int>(in.value("config.infer_steps")(0, 0));
  cfg.ablation = in.value("config.ablation")(0, 0) != 0.0;
  cfg.pi_width_mult = static_cast<int>(in.value("config.pi_width_mult")(0, 0));
  cfg.trans_width_mult = static_cast<int>(in.value("config.trans_width_mult")(0, 0));
  cfg.emis_width_mult = static_cast<int>(in.value("config.emis_width_mult")(0, 0));
  const Eigen::MatrixXd sig_mat = in.value("config.latent_signature");
  cfg.latent_signature.terms.clear();
  for (Eigen::Index i = 0; i < sig_mat.rows(); ++i)
    cfg.latent_signature.terms.emplace_back(static_cast<int>(sig_mat(i, 0)),
                                            static_cast<int>(sig_mat(i, 1)));
  cfg.latent_signature.normalize();

  Model model(cfg);
  for (const auto& name : model.params().names()) {
    if (!in.has(name))
      throw std::runtime_error("checkpoint: missing parameter '" + name +
                               "' (architecture mismatch?)");
    model.params().set_value(name, in.value(name));
  }

  data::ScaleTransform tr;
  tr.scale = in.value("transform.scale")(0, 0);
  tr.offset = in.value("transform.offset").col(0);
  return {std::move(model), tr};
}

}  // namespace eqddm::ssm
