#include "eqddm/lie.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace eqddm::lie {

std::vector<Eigen::MatrixXd> so_n_generators(int n) {
  if (n < 2) throw std::invalid_argument("so_n_generators: base dimension must be >= 2");
  std::vector<Eigen::MatrixXd> gens;
  if (n == 3) {
    Eigen::MatrixXd Lx = Eigen::MatrixXd::Zero(3, 3);
    Lx(1, 2) = -1.0; Lx(2, 1) = 1.0;
    Eigen::MatrixXd Ly = Eigen::MatrixXd::Zero(3, 3);
    Ly(0, 2) = 1.0; Ly(2, 0) = -1.0;
    Eigen::MatrixXd Lz = Eigen::MatrixXd::Zero(3, 3);
    Lz(0, 1) = -1.0; Lz(1, 0) = 1.0;
    gens = {Lx, Ly, Lz};
    return gens;
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
      A(j, i) = 1.0;
      A(i, j) = -1.0;
      gens.push_back(A);
    }
  }
  return gens;
}

MatrixGroup MatrixGroup::so(int n) {
  MatrixGroup g;
  g.n = n;
  g.generators = so_n_generators(n);
  return g;
}

bool MatrixGroup::same_as(const MatrixGroup& other) const {
  if (n != other.n || generators.size() != other.generators.size()) return false;
  for (size_t i = 0; i < generators.size(); ++i)
    if (generators[i] != other.generators[i]) return false;
  return true;
}

Eigen::MatrixXd matrix_exp(const Eigen::MatrixXd& A) {
  const int n = static_cast<int>(A.rows());
  if (A.cols() != n) throw std::invalid_argument("matrix_exp: matrix must be square");

  const double norm = A.cwiseAbs().rowwise().sum().maxCoeff();  // infinity norm
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));

  const Eigen::MatrixXd B = A / std::pow(2.0, squarings);
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd result = term;
  for (int k = 1; k <= 64; ++k) {
    term = (term * B) / static_cast<double>(k);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18 * std::max(1.0, result.cwiseAbs().maxCoeff())) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

Eigen::MatrixXd exp_map(const MatrixGroup& group, const Eigen::VectorXd& coeffs) {
  if (coeffs.size() != group.dim())
    throw std::invalid_argument("exp_map: coefficient count does not match algebra dimension");
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(group.n, group.n);
  for (int i = 0; i < group.dim(); ++i) A += coeffs[i] * group.generators[i];
  return matrix_exp(A);
}

Eigen::MatrixXd sample_group_element(const MatrixGroup& group, Rng& rng) {
  Eigen::VectorXd coeffs(group.dim());
  for (int i = 0; i < group.dim(); ++i) coeffs[i] = rng.uniform(-M_PI, M_PI);
  return exp_map(group, coeffs);
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

namespace {

bool is_orthogonal(const Eigen::MatrixXd& g) {
  if (g.rows() != g.cols()) return false;
  const Eigen::MatrixXd gram = g.transpose() * g;
  return (gram - Eigen::MatrixXd::Identity(g.rows(), g.cols())).norm() <= kElementTol;
}

bool is_antisymmetric(const Eigen::MatrixXd& A) {
  if (A.rows() != A.cols()) return false;
  return (A + A.transpose()).norm() <= kElementTol;
}

}  // namespace

Representation Representation::trivial(const MatrixGroup& group) {
  auto node = std::make_shared<Node>(Node{Kind::Trivial, 1, {}});
  return Representation(std::make_shared<const MatrixGroup>(group), node);
}

Representation Representation::base(const MatrixGroup& group) {
  auto node = std::make_shared<Node>(Node{Kind::Base, group.n, {}});
  return Representation(std::make_shared<const MatrixGroup>(group), node);
}

Representation Representation::dual(const Representation& rep) {
  auto node = std::make_shared<Node>(Node{Kind::Dual, rep.node_->size, {rep.node_}});
  return Representation(rep.group_, node);
}

Representation Representation::sum(const Representation& a, const Representation& b) {
  if (!a.group_->same_as(*b.group_))
    throw std::invalid_argument("Representation::sum: mismatched groups");
  auto node = std::make_shared<Node>(
      Node{Kind::Sum, a.node_->size + b.node_->size, {a.node_, b.node_}});
  return Representation(a.group_, node);
}

Representation Representation::product(const Representation& a, const Representation& b) {
  if (!a.group_->same_as(*b.group_))
    throw std::invalid_argument("Representation::product: mismatched groups");
  auto node = std::make_shared<Node>(
      Node{Kind::Product, a.node_->size * b.node_->size, {a.node_, b.node_}});
  return Representation(a.group_, node);
}

Representation Representation::tensor_power(const MatrixGroup& group, int rank) {
  if (rank < 0) throw std::invalid_argument("tensor_power: rank must be >= 0");
  if (rank == 0) return trivial(group);
  Representation rep = base(group);
  for (int k = 1; k < rank; ++k) rep = product(rep, base(group));
  return rep;
}

Eigen::MatrixXd Representation::rho_node(const Node& node, const Eigen::MatrixXd& g) {
  switch (node.kind) {
    case Kind::Trivial:
      return Eigen::MatrixXd::Identity(1, 1);
    case Kind::Base:
      return g;
    case Kind::Dual:
      return rho_node(*node.children[0], g.inverse()).transpose();
    case Kind::Sum: {
      Eigen::MatrixXd out = Eigen::MatrixXd::Zero(node.size, node.size);
      int off = 0;
      for (const auto& child : node.children) {
        out.block(off, off, child->size, child->size) = rho_node(*child, g);
        off += child->size;
      }
      return out;
    }
    case Kind::Product:
      return kron(rho_node(*node.children[0], g), rho_node(*node.children[1], g));
  }
  throw std::logic_error("unreachable");
}

Eigen::MatrixXd Representation::drho_node(const Node& node, const Eigen::MatrixXd& A) {
  switch (node.kind) {
    case Kind::Trivial:
      return Eigen::MatrixXd::Zero(1, 1);
    case Kind::Base:
      return A;
    case Kind::Dual:
      return -drho_node(*node.children[0], A).transpose();
    case Kind::Sum: {
      Eigen::MatrixXd out = Eigen::MatrixXd::Zero(node.size, node.size);
      int off = 0;
      for (const auto& child : node.children) {
        out.block(off, off, child->size, child->size) = drho_node(*child, A);
        off += child->size;
      }
      return out;
    }
    case Kind::Product: {
      // product rule: drho_a (x) I + I (x) drho_b
      const auto& a = *node.children[0];
      const auto& b = *node.children[1];
      return kron(drho_node(a, A), Eigen::MatrixXd::Identity(b.size, b.size)) +
             kron(Eigen::MatrixXd::Identity(a.size, a.size), drho_node(b, A));
    }
  }
  throw std::logic_error("unreachable");
}

Eigen::MatrixXd Representation::rho(const Eigen::MatrixXd& g) const {
  if (g.rows() != group_->n || g.cols() != group_->n)
    throw std::invalid_argument("rho: element has wrong dimensions");
  if (!is_orthogonal(g))
    throw std::invalid_argument("rho: element is not orthogonal within tolerance");
  return rho_node(*node_, g);
}

Eigen::MatrixXd Representation::drho(const Eigen::MatrixXd& A) const {
  if (A.rows() != group_->n || A.cols() != group_->n)
    throw std::invalid_argument("drho: element has wrong dimensions");
  if (!is_antisymmetric(A))
    throw std::invalid_argument("drho: element is not in the algebra within tolerance");
  return drho_node(*node_, A);
}

RepSignature::RepSignature(std::initializer_list<std::pair<int, int>> t) : terms(t) {
  normalize();
}

void RepSignature::normalize() {
  std::vector<std::pair<int, int>> merged;  // (rank, mult) keyed by rank
  for (const auto& [mult, rank] : terms) {
    if (mult < 0 || rank < 0)
      throw std::invalid_argument("RepSignature: multiplicities and ranks must be >= 0");
    if (mult == 0) continue;
    bool found = false;
    for (auto& [r, m] : merged)
      if (r == rank) {
        m += mult;
        found = true;
        break;
      }
    if (!found) merged.emplace_back(rank, mult);
  }
  std::sort(merged.begin(), merged.end());
  terms.clear();
  for (const auto& [rank, mult] : merged) terms.emplace_back(mult, rank);
}

int RepSignature::size(int n) const {
  int total = 0;
  for (const auto& [mult, rank] : terms) {
    int block = 1;
    for (int k = 0; k < rank; ++k) block *= n;
    total += mult * block;
  }
  return total;
}

int RepSignature::multiplicity(int rank) const {
  for (const auto& [mult, r] : terms)
    if (r == rank) return mult;
  return 0;
}

RepSignature RepSignature::parse(const std::string& text) {
  RepSignature sig;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= item.size())
      throw std::invalid_argument("RepSignature::parse: expected 'MULTxRANK' terms, got '" + item + "'");
    size_t posted = 0;
    int mult, rank;
    try {
      mult = std::stoi(item.substr(0, x), &posted);
      if (posted != x) throw std::invalid_argument("");
      rank = std::stoi(item.substr(x + 1), &posted);
      if (posted != item.size() - x - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw std::invalid_argument("RepSignature::parse: malformed term '" + item + "'");
    }
    sig.terms.emplace_back(mult, rank);
  }
  if (sig.terms.empty()) throw std::invalid_argument("RepSignature::parse: empty signature");
  sig.normalize();
  return sig;
}

std::string RepSignature::to_string() const {
  std::string out;
  for (const auto& [mult, rank] : terms) {
    if (!out.empty()) out += ',';
    out += std::to_string(mult) + "x" + std::to_string(rank);
  }
  return out.empty() ? "0x0" : out;
}

Representation rep_from_signature(const MatrixGroup& group, const RepSignature& sig) {
  RepSignature canon = sig;
  canon.normalize();
  std::vector<Representation> parts;
  for (const auto& [mult, rank] : canon.terms)
    for (int c = 0; c < mult; ++c) parts.push_back(Representation::tensor_power(group, rank));
  if (parts.empty()) throw std::invalid_argument("rep_from_signature: signature has size zero");
  Representation rep = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) rep = Representation::sum(rep, parts[i]);
  return rep;
}

}  // namespace eqddm::lie
