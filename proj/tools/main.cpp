#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "eqddm/data.hpp"
#include "eqddm/equivariant.hpp"
#include "eqddm/eval.hpp"
#include "eqddm/lie.hpp"
#include "eqddm/ssm.hpp"

namespace {

constexpr const char* kVersion = "eqddm 1.0.0";

/// Errors that are the caller's fault (bad flags, malformed signatures).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string format_num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

eqddm::lie::MatrixGroup parse_group(const std::string& name) {
  if (name == "so2") return eqddm::lie::MatrixGroup::so(2);
  if (name == "so3") return eqddm::lie::MatrixGroup::so(3);
  throw UsageError("unknown group '" + name + "' (expected so2 or so3)");
}

// ---------------------------------------------------------------------------
// basis
// ---------------------------------------------------------------------------

void run_basis(const std::string& group_name, const std::string& in_sig,
               const std::string& out_sig, const std::string& out_path) {
  const eqddm::lie::MatrixGroup group = parse_group(group_name);
  eqddm::lie::RepSignature sig_in, sig_out;
  try {
    sig_in = eqddm::lie::RepSignature::parse(in_sig);
    sig_out = eqddm::lie::RepSignature::parse(out_sig);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const eqddm::eqv::EquivariantBasis basis =
      eqddm::eqv::solve_equivariant_basis(group, sig_in, sig_out);

  std::ostringstream out;
  out << "group," << group_name << "\n";
  out << "in_sig," << sig_in.to_string() << "\n";
  out << "out_sig," << sig_out.to_string() << "\n";
  out << "size_in," << basis.size_in << "\n";
  out << "size_out," << basis.size_out << "\n";
  out << "r," << basis.rank() << "\n";
  out << "r_b," << basis.bias_rank() << "\n";
  for (int k = 0; k < basis.rank(); ++k) {
    out << "weight_basis," << k << "\n";
    const Eigen::MatrixXd w =
        eqddm::eqv::unvec_rowmajor(basis.Q.col(k), basis.size_out, basis.size_in);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) out << (j ? "," : "") << format_num(w(i, j));
      out << "\n";
    }
  }
  for (int k = 0; k < basis.bias_rank(); ++k) {
    out << "bias_basis," << k << "\n";
    for (Eigen::Index i = 0; i < basis.bias_Q.rows(); ++i)
      out << (i ? "," : "") << format_num(basis.bias_Q(i, k));
    out << "\n";
  }

  if (out_path.empty()) {
    std::cout << out.str();
  } else {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot open '" + out_path + "' for writing");
    f << out.str();
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

eqddm::data::Sequence concatenate(const std::vector<eqddm::data::Sequence>& seqs) {
  int rows = 0;
  for (const auto& s : seqs) rows += s.timesteps();
  eqddm::data::Sequence all;
  all.values = Eigen::MatrixXd::Zero(rows, seqs[0].dims());
  all.mask = eqddm::data::Mask::Constant(rows, seqs[0].dims(), false);
  int off = 0;
  for (const auto& s : seqs) {
    all.values.middleRows(off, s.timesteps()) = s.values;
    all.mask.middleRows(off, s.timesteps()) = s.mask;
    off += s.timesteps();
  }
  return all;
}

void run_train(const eqddm::ssm::ModelConfig& cfg, const std::vector<std::string>& data_paths,
               const std::string& checkpoint_path, const std::string& trace_path) {
  std::vector<eqddm::data::Sequence> raw;
  for (const auto& path : data_paths) raw.push_back(eqddm::data::load_csv(path));
  for (size_t i = 1; i < raw.size(); ++i)
    if (raw[i].dims() != raw[0].dims())
      throw std::runtime_error("training sequences disagree on joint count");
  if (raw[0].dims() != 3 * cfg.D)
    throw std::runtime_error("training data has " + std::to_string(raw[0].dims() / 3) +
                             " joints but the config says D=" + std::to_string(cfg.D));

  const eqddm::data::ScaleTransform transform = eqddm::data::ScaleTransform::fit(concatenate(raw));
  std::vector<eqddm::data::Sequence> normalized;
  for (const auto& s : raw) normalized.push_back(transform.apply(s));

  eqddm::ssm::Model model(cfg);
  std::cerr << "[eqddm] training: " << cfg.describe() << "\n";
  std::cerr << "[eqddm] free parameters: " << model.free_parameter_count() << "\n";

  eqddm::ad::ParamStore phi;
  eqddm::Rng phi_rng(cfg.seed + 1);
  eqddm::ssm::init_variational_params(model, normalized, phi, phi_rng);
  const eqddm::ssm::TrainResult result = eqddm::ssm::train(model, phi, normalized);

  eqddm::ssm::save_checkpoint(model, transform, checkpoint_path);
  std::cerr << "[eqddm] checkpoint written to " << checkpoint_path << "\n";
  if (!result.raw_trace.empty())
    std::cerr << "[eqddm] final loss " << result.raw_trace.back() << " (best "
              << result.loss_trace.back() << ")\n";

  if (!trace_path.empty()) {
    std::ofstream f(trace_path);
    if (!f) throw std::runtime_error("cannot open '" + trace_path + "' for writing");
    f << "epoch,loss,best\n";
    for (size_t i = 0; i < result.raw_trace.size(); ++i)
      f << i << ',' << format_num(result.raw_trace[i]) << ','
        << format_num(result.loss_trace[i]) << "\n";
  }
}

// ---------------------------------------------------------------------------
// predict / evaluate / plot
// ---------------------------------------------------------------------------

void run_predict(const std::string& checkpoint_path, const std::string& test_path,
                 const std::string& out_path, std::uint64_t seed) {
  auto [model, transform] = eqddm::ssm::load_checkpoint(checkpoint_path);
  const eqddm::data::Sequence test = eqddm::data::load_csv(test_path);
  if (test.dims() != 3 * model.config().D)
    throw std::runtime_error("test data width does not match the checkpoint (D=" +
                             std::to_string(model.config().D) + ")");
  const eqddm::data::Sequence normalized = transform.apply(test);
  const eqddm::ssm::RollingResult rolling = eqddm::ssm::rolling_predict(model, normalized, seed);
  const eqddm::eval::PredictionTable table =
      eqddm::eval::PredictionTable::from_rolling(rolling, test.values, test.mask, transform);
  table.save_csv(out_path);
  std::cerr << "[eqddm] predictions written to " << out_path << "\n";
}

void run_evaluate(const std::string& checkpoint_path, const std::vector<std::string>& test_paths,
                  int n_rotations, std::uint64_t seed, const std::string& out_path,
                  bool as_json, const std::string& pred_dir) {
  auto [model, transform] = eqddm::ssm::load_checkpoint(checkpoint_path);
  std::vector<eqddm::data::Sequence> tests;
  for (const auto& path : test_paths) {
    eqddm::data::Sequence s = eqddm::data::load_csv(path);
    s.name = std::filesystem::path(path).stem().string();
    tests.push_back(std::move(s));
  }
  eqddm::eval::EvalOptions options;
  options.n_rotations = n_rotations;
  options.seed = seed;
  options.variant = model.config().ablation ? "ablation" : "equivariant";
  std::vector<eqddm::eval::EvalDetail> details;
  const eqddm::eval::Evaluation result =
      eqddm::eval::evaluate(model, transform, tests, options, pred_dir.empty() ? nullptr : &details);

  if (!pred_dir.empty()) {
    std::filesystem::create_directories(pred_dir);
    for (const auto& d : details) {
      const eqddm::eval::PredictionTable table =
          eqddm::eval::PredictionTable::from_rolling(d.rolling, d.truth_raw, d.mask, transform);
      std::string label = d.rotation == "none" ? "regular" : ("rot_" + d.rotation);
      table.save_csv(pred_dir + "/" + d.dataset + "_" + label + ".csv");
    }
  }

  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot open '" + out_path + "' for writing");
    f << result.to_csv();
  }
  if (as_json)
    std::cout << result.to_json();
  else
    std::cout << result.to_table();
}

void run_plot(const std::string& pred_path, const std::string& out_dir, bool svg) {
  const eqddm::eval::PredictionTable table = eqddm::eval::PredictionTable::load_csv(pred_path);
  eqddm::eval::emit_plot_data(table, out_dir, svg);
  std::cerr << "[eqddm] plot series written to " << out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SO(3)-equivariant deep switching state-space model for motion prediction"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // basis
  auto* basis = app.add_subcommand("basis", "solve and print an equivariant layer basis");
  std::string group_name = "so3", in_sig, out_sig, basis_out;
  basis->add_option("--group", group_name, "matrix group (so2|so3)")->required();
  basis->add_option("--in-sig", in_sig, "input signature, e.g. 2x0,1x1")->required();
  basis->add_option("--out-sig", out_sig, "output signature")->required();
  basis->add_option("--out", basis_out, "write to file instead of stdout");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "simulate a pendulum trajectory to CSV");
  eqddm::data::PendulumSpec pend;
  std::string sim_out = "pendulum.csv";
  std::uint64_t sim_seed = 0;
  simulate->add_option("--T", pend.timesteps, "timesteps")->check(CLI::PositiveNumber);
  simulate->add_option("--dt", pend.dt, "step size in seconds")->check(CLI::PositiveNumber);
  simulate->add_option("--gravity", pend.gravity, "gravity (m/s^2)");
  simulate->add_option("--length", pend.length, "pendulum length (m)")->check(CLI::PositiveNumber);
  simulate->add_option("--theta0", pend.theta0, "initial angle (rad)");
  simulate->add_option("--omega0", pend.omega0, "initial angular velocity (rad/s)");
  simulate->add_option("--noise", pend.noise_sigma, "observation noise std");
  simulate->add_option("--seed", sim_seed, "noise seed");
  simulate->add_option("--out", sim_out, "output CSV path");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on trajectory CSVs");
  std::string config_path, ckpt_out = "model.ckpt", trace_out;
  std::vector<std::string> data_paths;
  std::vector<std::pair<std::string, std::string>> overrides;
  train_cmd->add_option("--config", config_path, "flat key=value config file");
  train_cmd->add_option("--data", data_paths, "training CSV(s)")->required();
  train_cmd->add_option("--out", ckpt_out, "checkpoint output path");
  train_cmd->add_option("--trace", trace_out, "loss trace CSV output path");
  std::string ov_epochs, ov_lr, ov_seed, ov_K, ov_S, ov_D, ov_lags, ov_sigma_x, ov_infer;
  bool ov_ablation = false, ov_sigma_x_train = false;
  train_cmd->add_option("--epochs", ov_epochs, "override: training epochs");
  train_cmd->add_option("--lr", ov_lr, "override: learning rate");
  train_cmd->add_option("--seed", ov_seed, "override: seed");
  train_cmd->add_option("--K", ov_K, "override: latent dimension");
  train_cmd->add_option("--S", ov_S, "override: number of states");
  train_cmd->add_option("--D", ov_D, "override: number of joints");
  train_cmd->add_option("--lags", ov_lags, "override: comma-separated lags");
  train_cmd->add_option("--sigma-x", ov_sigma_x, "override: observation noise std");
  train_cmd->add_option("--infer-steps", ov_infer, "override: test-time gradient steps");
  train_cmd->add_flag("--sigma-x-trainable", ov_sigma_x_train, "make sigma_x trainable");
  train_cmd->add_flag("--ablation", ov_ablation, "non-equivariant dense ablation");

  // predict
  auto* predict = app.add_subcommand("predict", "rolling prediction for a test CSV");
  std::string p_ckpt, p_test, p_out = "predictions.csv";
  std::uint64_t p_seed = 0;
  predict->add_option("--checkpoint", p_ckpt, "trained checkpoint")->required();
  predict->add_option("--test", p_test, "test CSV")->required();
  predict->add_option("--out", p_out, "prediction CSV output path");
  predict->add_option("--seed", p_seed, "inference seed");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "NRMSE table over regular and rotated test sets");
  std::string e_ckpt, e_out = "results.csv", e_pred_dir;
  std::vector<std::string> e_tests;
  int e_rotate = 0;
  std::uint64_t e_seed = 0;
  bool e_json = false;
  eval_cmd->add_option("--checkpoint", e_ckpt, "trained checkpoint")->required();
  eval_cmd->add_option("--test", e_tests, "test CSV(s)")->required();
  eval_cmd->add_option("--rotate", e_rotate, "number of random z-rotated copies")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--seed", e_seed, "rotation/inference seed");
  eval_cmd->add_option("--out", e_out, "results CSV output path");
  eval_cmd->add_option("--pred-dir", e_pred_dir, "also write per-case prediction CSVs here");
  eval_cmd->add_flag("--json", e_json, "print machine-readable JSON instead of the table");

  // plot
  auto* plot = app.add_subcommand("plot", "convert a prediction CSV to per-joint plot series");
  std::string pl_pred, pl_dir = "plots";
  bool pl_svg = false;
  plot->add_option("--pred", pl_pred, "prediction CSV from `predict`")->required();
  plot->add_option("--out-dir", pl_dir, "output directory");
  plot->add_flag("--svg", pl_svg, "also write self-contained SVG charts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(basis)) {
      run_basis(group_name, in_sig, out_sig, basis_out);
    } else if (app.got_subcommand(simulate)) {
      eqddm::Rng rng(sim_seed);
      eqddm::data::save_csv(eqddm::data::simulate_pendulum(pend, &rng), sim_out);
      std::cerr << "[eqddm] wrote " << pend.timesteps << " rows to " << sim_out << "\n";
    } else if (app.got_subcommand(train_cmd)) {
      eqddm::ssm::ModelConfig cfg;
      if (!config_path.empty()) cfg = eqddm::ssm::ModelConfig::from_file(config_path);
      // flags take precedence over the config file
      try {
        if (!ov_epochs.empty()) cfg.apply_key("epochs", ov_epochs);
        if (!ov_lr.empty()) cfg.apply_key("lr", ov_lr);
        if (!ov_seed.empty()) cfg.apply_key("seed", ov_seed);
        if (!ov_K.empty()) cfg.apply_key("K", ov_K);
        if (!ov_S.empty()) cfg.apply_key("S", ov_S);
        if (!ov_D.empty()) cfg.apply_key("D", ov_D);
        if (!ov_lags.empty()) cfg.apply_key("lags", ov_lags);
        if (!ov_sigma_x.empty()) cfg.apply_key("sigma_x", ov_sigma_x);
        if (!ov_infer.empty()) cfg.apply_key("infer_steps", ov_infer);
        if (ov_sigma_x_train) cfg.apply_key("sigma_x_trainable", "1");
        if (ov_ablation) cfg.apply_key("ablation", "1");
        cfg.validate();
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      run_train(cfg, data_paths, ckpt_out, trace_out);
    } else if (app.got_subcommand(predict)) {
      run_predict(p_ckpt, p_test, p_out, p_seed);
    } else if (app.got_subcommand(eval_cmd)) {
      run_evaluate(e_ckpt, e_tests, e_rotate, e_seed, e_out, e_json, e_pred_dir);
    } else if (app.got_subcommand(plot)) {
      run_plot(pl_pred, pl_dir, pl_svg);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
