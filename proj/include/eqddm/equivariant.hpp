#pragma once

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <vector>

#include "eqddm/autodiff.hpp"
#include "eqddm/lie.hpp"
#include "eqddm/rng.hpp"

namespace eqddm::eqv {

/// Relative SVD cutoff: singular values below this fraction of the largest
/// count as zero when extracting a nullspace.
inline constexpr double kSvdRelTol = 1e-7;

/// Row-major flattening. vec(W)[i*cols + j] = W(i, j); this is the pairing
/// under which rho_out (x) rho_in* acts on flattened weight matrices.
Eigen::VectorXd vec_rowmajor(const Eigen::MatrixXd& M);
Eigen::MatrixXd unvec_rowmajor(const Eigen::VectorXd& v, int rows, int cols);

/// Stacked algebra constraints for equivariant maps rep_in -> rep_out:
/// rows are drho(A_i) of rep_out (x) dual(rep_in), one block per generator.
/// A weight W is equivariant iff C * vec(W) = 0.
Eigen::MatrixXd constraint_matrix(const lie::Representation& rep_in,
                                  const lie::Representation& rep_out);

/// Orthonormal nullspace basis of C by dense SVD. Keeps right singular
/// vectors whose singular value is below rel_tol * sigma_max (the whole
/// space when C is exactly zero). Columns satisfy Q^T Q = I.
Eigen::MatrixXd solve_basis(const Eigen::MatrixXd& C, double rel_tol = kSvdRelTol);

/// Solved equivariance constraint for one weight + bias pair.
struct EquivariantBasis {
  lie::RepSignature sig_in, sig_out;
  int size_in = 0, size_out = 0;
  Eigen::MatrixXd Q;       ///< (size_out * size_in) x r, orthonormal columns
  Eigen::MatrixXd bias_Q;  ///< size_out x r_b, orthonormal; invariant bias directions

  int rank() const { return static_cast<int>(Q.cols()); }
  int bias_rank() const { return static_cast<int>(bias_Q.cols()); }
};

/// Solve the weight and bias nullspace problems for a signature pair.
EquivariantBasis solve_equivariant_basis(const lie::MatrixGroup& group,
                                         const lie::RepSignature& sig_in,
                                         const lie::RepSignature& sig_out);

/// Orthogonal projection Q Q^T v0 onto the equivariant subspace.
Eigen::VectorXd project(const EquivariantBasis& basis, const Eigen::VectorXd& v0);

/// Block layout of a signature: scalar dims first, then one contiguous block
/// per higher-rank copy in ascending-rank, copy-major order.
struct SignatureLayout {
  int total = 0;
  int scalar_count = 0;                         ///< rank-0 dims (layout head)
  std::vector<std::pair<int, int>> blocks;       ///< (offset, size) per non-scalar copy

  static SignatureLayout of(const lie::RepSignature& sig, int n);
  int gate_count() const { return static_cast<int>(blocks.size()); }
};

/// Gated equivariant nonlinearity. Scalar channels pass through the logistic
/// sigmoid; every higher-rank block is multiplied by sigmoid of its gate
/// scalar, so each block is rescaled by an invariant amount and the layout is
/// preserved. Expects one gate per non-scalar block.
Eigen::VectorXd gated_nonlinearity(const lie::RepSignature& sig, int n,
                                   const Eigen::VectorXd& features,
                                   const Eigen::VectorXd& gates);

/// Tape version of the above.
ad::Var gated_nonlinearity(ad::Tape& tape, const SignatureLayout& layout,
                           ad::Var features, ad::Var gates);

/// One affine layer bound to named parameters in a ParamStore, optionally
/// followed by the gated nonlinearity. Two implementations: the equivariant
/// layer (weights confined to the solved basis) and the unconstrained dense
/// layer used by the ablation.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual ad::Var forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const = 0;
  virtual int in_size() const = 0;
  virtual int out_size() const = 0;
  virtual int free_parameter_count() const = 0;
};

using LayerPtr = std::shared_ptr<const Layer>;

/// Equivariant affine layer. The trainable objects are the r free basis
/// coefficients (weight = unvec(Q w)), the r_b invariant bias coefficients,
/// and, when gated, an invariant gate map from the input's scalar channels.
class EquivariantLinear : public Layer {
 public:
  /// Solves the basis, registers parameters under `prefix` and initializes
  /// the free coefficients as Q^T v0 with v0 ~ N(0, 1/size_in) entrywise.
  /// Throws std::invalid_argument when both ranks are zero (degenerate).
  static std::shared_ptr<EquivariantLinear> create(const lie::MatrixGroup& group,
                                                   const lie::RepSignature& sig_in,
                                                   const lie::RepSignature& sig_out,
                                                   bool gated, const std::string& prefix,
                                                   ad::ParamStore& params, Rng& rng);

  ad::Var forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const override;
  int in_size() const override { return basis_.size_in; }
  int out_size() const override { return basis_.size_out; }
  int free_parameter_count() const override;

  const EquivariantBasis& basis() const { return basis_; }
  /// Effective weight matrix for the current coefficients.
  Eigen::MatrixXd weight(const ad::ParamStore& params) const;

 private:
  EquivariantBasis basis_;
  SignatureLayout layout_in_, layout_out_;
  bool gated_ = false;
  std::string prefix_;
};

/// Unconstrained dense layer of identical width; sigmoid on every channel
/// when gated. Stands in for the equivariant layer in the ablation model.
class DenseLinear : public Layer {
 public:
  static std::shared_ptr<DenseLinear> create(int in_size, int out_size, bool gated,
                                             const std::string& prefix,
                                             ad::ParamStore& params, Rng& rng);

  ad::Var forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const override;
  int in_size() const override { return in_; }
  int out_size() const override { return out_; }
  int free_parameter_count() const override { return in_ * out_ + out_; }

 private:
  int in_ = 0, out_ = 0;
  bool gated_ = false;
  std::string prefix_;
};

/// One affine stage of a network: signatures plus whether a gated
/// nonlinearity follows. An invariant head is simply a stage whose output
/// signature is all rank-0.
struct LayerSpec {
  lie::RepSignature sig_in;
  lie::RepSignature sig_out;
  bool gated = true;
};

/// A chain of layers, optionally with several parallel input streams that
/// are averaged (lag pooling) before the tail layers, and an optional
/// softmax head. Stream layers hold independent weights per stream.
struct NetworkSpec {
  int n_streams = 1;
  std::vector<LayerSpec> stream_layers;  ///< applied per stream
  std::vector<LayerSpec> tail_layers;    ///< applied after the pool
  bool softmax_head = false;
  bool ablation = false;
};

class Network {
 public:
  /// Builds every layer and registers parameters under `prefix`. Throws on
  /// signature chain mismatches.
  static Network build(const lie::MatrixGroup& group, const NetworkSpec& spec,
                       const std::string& prefix, ad::ParamStore& params, Rng& rng);

  ad::Var forward(ad::Tape& tape, const ad::ParamStore& params,
                  const std::vector<ad::Var>& streams) const;
  ad::Var forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const;

  /// Non-tape convenience evaluation.
  Eigen::VectorXd forward_plain(const ad::ParamStore& params,
                                const std::vector<Eigen::VectorXd>& streams) const;
  Eigen::VectorXd forward_plain(const ad::ParamStore& params, const Eigen::VectorXd& x) const;

  int n_streams() const { return n_streams_; }
  int in_size() const;
  int out_size() const;
  int free_parameter_count() const;

 private:
  int n_streams_ = 1;
  std::vector<std::vector<LayerPtr>> stream_layers_;  // [layer][stream]
  std::vector<LayerPtr> tail_layers_;
  bool softmax_head_ = false;
};

/// Canonical signature for a hidden feature space of the given width:
/// c1 = floor(width / (n + 1)) rank-1 copies (at least one when width >= n)
/// and scalars for the remaining dims.
lie::RepSignature hidden_signature(int width, int n);

}  // namespace eqddm::eqv
