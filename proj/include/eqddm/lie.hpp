#pragma once

#include <Eigen/Dense>

#include <memory>
#include <vector>

#include "eqddm/rng.hpp"

namespace eqddm::lie {

/// Tolerance on ||R^T R - I||_F below which a matrix counts as a valid
/// orthogonal group element.
inline constexpr double kElementTol = 1e-8;

/// A matrix Lie group described by its base dimension and the basis matrices
/// of its Lie algebra.
struct MatrixGroup {
  int n = 0;                                 ///< base space dimension
  std::vector<Eigen::MatrixXd> generators;   ///< D algebra basis matrices, n x n

  int dim() const { return static_cast<int>(generators.size()); }

  /// The rotation group SO(n). See so_n_generators for the basis convention.
  static MatrixGroup so(int n);

  bool same_as(const MatrixGroup& other) const;
};

/// Antisymmetric generator basis for so(n), n >= 2. Returns n(n-1)/2 matrices
/// with entries in {-1, 0, 1}, pairwise orthogonal under the Frobenius inner
/// product.
///
/// Ordering convention (frozen; the equivariant bases depend on it):
///   n == 3: the cyclic triple (Lx, Ly, Lz) with (Lk)_ij = -eps_{kij}, so
///           exp(theta * Lz) is the standard counterclockwise z rotation and
///           sum_k a_k L_k is the cross-product matrix [a]_x.
///   else:   index pairs (i, j), i < j, in lexicographic order, with
///           A[j][i] = +1 and A[i][j] = -1.
std::vector<Eigen::MatrixXd> so_n_generators(int n);

/// Matrix exponential by scaling-and-squaring around a Taylor core.
/// Relative accuracy ~1e-13 for ||A|| <= 10, which covers every matrix this
/// project exponentiates.
Eigen::MatrixXd matrix_exp(const Eigen::MatrixXd& A);

/// exp(sum_i coeffs[i] * A_i) for the group's generators.
Eigen::MatrixXd exp_map(const MatrixGroup& group, const Eigen::VectorXd& coeffs);

/// Group element from generator coefficients drawn uniform on [-pi, pi]^D.
Eigen::MatrixXd sample_group_element(const MatrixGroup& group, Rng& rng);

/// Kronecker product, row-major index pairing: entry ((i*p + k), (j*q + l))
/// is A(i,j) * B(k,l) for B of shape p x q.
Eigen::MatrixXd kron(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

/// Composite representation over a matrix group: direct sums, tensor
/// products, duals and tensor powers of the base action. Values are cheap
/// shared-tree handles; rho/drho evaluate eagerly to dense matrices.
class Representation {
 public:
  static Representation trivial(const MatrixGroup& group);
  static Representation base(const MatrixGroup& group);
  static Representation dual(const Representation& rep);
  static Representation sum(const Representation& a, const Representation& b);
  static Representation product(const Representation& a, const Representation& b);
  /// rank-fold tensor power of the base representation; rank 0 is trivial.
  static Representation tensor_power(const MatrixGroup& group, int rank);

  int size() const { return node_->size; }
  const MatrixGroup& group() const { return *group_; }

  /// Group action rho(g). Throws std::invalid_argument if g is not orthogonal
  /// within kElementTol.
  Eigen::MatrixXd rho(const Eigen::MatrixXd& g) const;

  /// Algebra action drho(A). Throws std::invalid_argument if A is not
  /// antisymmetric within kElementTol.
  Eigen::MatrixXd drho(const Eigen::MatrixXd& A) const;

 private:
  enum class Kind { Trivial, Base, Dual, Sum, Product };

  struct Node {
    Kind kind;
    int size;
    std::vector<std::shared_ptr<const Node>> children;
  };

  Representation(std::shared_ptr<const MatrixGroup> group, std::shared_ptr<const Node> node)
      : group_(std::move(group)), node_(std::move(node)) {}

  static Eigen::MatrixXd rho_node(const Node& node, const Eigen::MatrixXd& g);
  static Eigen::MatrixXd drho_node(const Node& node, const Eigen::MatrixXd& A);

  std::shared_ptr<const MatrixGroup> group_;
  std::shared_ptr<const Node> node_;
};

/// Feature-space description U = c_0 T_0 + c_1 T_1 + ... as a list of
/// (multiplicity, tensor rank) terms. Canonical layout is ascending rank,
/// copy-major: all scalar dims first, then each rank-1 copy as a contiguous
/// n-block, then rank-2 copies, and so on. Everything downstream (bases,
/// gating, serialization) assumes this order.
struct RepSignature {
  std::vector<std::pair<int, int>> terms;  ///< (multiplicity, rank), ascending rank

  RepSignature() = default;
  RepSignature(std::initializer_list<std::pair<int, int>> t);

  /// Dimension of the represented space for base dimension n.
  int size(int n) const;

  int multiplicity(int rank) const;

  /// Parse "2x0,1x1" style text (multiplicity x rank, comma separated).
  static RepSignature parse(const std::string& text);
  std::string to_string() const;

  void normalize();  ///< merge duplicates, drop zeros, sort by rank
};

/// The representation described by a signature: the direct sum of c_a copies
/// of the a-fold tensor power of the base rep, ascending rank.
Representation rep_from_signature(const MatrixGroup& group, const RepSignature& sig);

}  // namespace eqddm::lie
