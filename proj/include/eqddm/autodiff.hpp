#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace eqddm::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named float64 parameter arrays with per-entry Adam state.
///
/// Shapes are fixed at creation. Iteration order is the (sorted) name order,
/// so optimizer sweeps are deterministic.
class ParamStore {
 public:
  void create(const std::string& name, const Eigen::MatrixXd& init);
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const Eigen::MatrixXd& value(const std::string& name) const;
  /// Direct write access (initialization and tests). Shape must not change.
  void set_value(const std::string& name, const Eigen::MatrixXd& v);
  std::vector<std::string> names() const;
  int total_size() const;

  /// Bias-corrected Adam update for every parameter present in `grads`.
  /// Throws std::runtime_error naming the parameter on a non-finite gradient
  /// or a non-finite post-update value.
  void adam_step(const std::map<std::string, Eigen::MatrixXd>& grads, const AdamConfig& cfg);

  /// Checkpoint container: "EQDMCKPT" magic, a u32 format version, then
  /// (name, rows, cols, row-major float64 little-endian data) records.
  /// Round-trips bit-exactly on one platform.
  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

 private:
  struct Entry {
    Eigen::MatrixXd value;
    Eigen::MatrixXd m;   // first moment
    Eigen::MatrixXd v;   // second moment
    long step = 0;
  };
  std::map<std::string, Entry> entries_;
};

/// Record of differentiable operations for one forward pass.
///
/// Values are dense float64 matrices (column vectors are m x 1). backward()
/// runs exact reverse-mode accumulation in reverse creation order. Not
/// thread-safe; build and differentiate a tape on one thread.
class Tape {
 public:
  Var constant(const Eigen::MatrixXd& value);
  Var constant_scalar(double value);

  /// Leaf bound to a named parameter. Repeated calls with the same name
  /// return the same node, so gradients from every use site accumulate.
  Var param(const ParamStore& store, const std::string& name);

  /// Unbound differentiable leaf (for gradients w.r.t. plain inputs).
  Var input(const Eigen::MatrixXd& value);

  /// Build-once cache: the first call under `key` runs `build`, later calls
  /// return the same node. Used to materialize layer weights once per tape.
  Var memo(const std::string& key, const std::function<Var()>& build);

  const Eigen::MatrixXd& value(Var v) const;
  /// Gradient of the last backward() output w.r.t. this node (zero matrix if
  /// the node was never reached).
  Eigen::MatrixXd grad(Var v) const;

  // arithmetic
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var neg(Var a);
  Var mul(Var a, Var b);          ///< elementwise
  Var cw_quotient(Var a, Var b);  ///< elementwise a / b
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var matmul(Var a, Var b);

  // reductions and shape
  Var sum(Var a);  ///< 1x1
  Var slice_rows(Var a, int row0, int nrows);
  Var vstack(const std::vector<Var>& parts);
  Var average(const std::vector<Var>& parts);
  /// Reshape a (rows*cols) x 1 vector to rows x cols, row-major element order
  /// (the vec convention used by the equivariant bases).
  Var reshape_rowmajor(Var a, int rows, int cols);

  // nonlinear elementwise
  Var sigmoid(Var a);
  Var softplus(Var a);
  Var log(Var a);
  Var exp(Var a);
  /// a * log(b) elementwise with the 0 * log(.) = 0 convention.
  Var xlogy(Var a, Var b);

  // vector specials (column vectors)
  Var softmax(Var a);
  Var logsumexp(Var a);  ///< 1x1

  // probability building blocks (composites of the primitives above)
  /// log N(x; mu, diag(sigma^2)). Throws if any sigma <= 0.
  Var gauss_logpdf(Var x, Var mu, Var sigma);
  /// KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)), diagonal. Throws if sigma <= 0.
  Var kl_gauss(Var mu1, Var sigma1, Var mu2, Var sigma2);
  /// KL(Cat(p) || Cat(q)) for simplex vectors.
  Var kl_cat(Var p, Var q);
  /// mu + sigma .* eps with a fixed noise draw.
  Var reparam_sample(Var mu, Var sigma, const Eigen::VectorXd& eps);

  /// Reverse-mode sweep from a 1x1 output. Throws on non-scalar output.
  void backward(Var output);

  /// Gradients for every named parameter used on this tape (zeros for
  /// parameters the output did not depend on).
  std::map<std::string, Eigen::MatrixXd> param_grads() const;

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;  // empty until touched by backward
    bool needs_grad = false;
    std::function<void(Tape&, const Eigen::MatrixXd&)> pull;  // null for leaves
  };

  Var make(Eigen::MatrixXd value, bool needs_grad,
           std::function<void(Tape&, const Eigen::MatrixXd&)> pull);
  void accumulate(int id, const Eigen::MatrixXd& g);
  const Eigen::MatrixXd& val(int id) const { return nodes_[id].value; }
  void check_same_tape(Var a) const;

  std::vector<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  std::map<std::string, int> memo_nodes_;
};

/// Convenience for the common "differentiate a scalar w.r.t. a store" path:
/// runs backward and returns the parameter gradient map.
std::map<std::string, Eigen::MatrixXd> grad(Tape& tape, Var scalar_output);

}  // namespace eqddm::ad
