#include "eqddm/equivariant.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

namespace eqddm::eqv {

Eigen::VectorXd vec_rowmajor(const Eigen::MatrixXd& M) {
  Eigen::VectorXd v(M.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) v[k++] = M(i, j);
  return v;
}

Eigen::MatrixXd unvec_rowmajor(const Eigen::VectorXd& v, int rows, int cols) {
  if (v.size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("unvec_rowmajor: size mismatch");
  Eigen::MatrixXd M(rows, cols);
  Eigen::Index k = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) M(i, j) = v[k++];
  return M;
}

Eigen::MatrixXd constraint_matrix(const lie::Representation& rep_in,
                                  const lie::Representation& rep_out) {
  if (!rep_in.group().same_as(rep_out.group()))
    throw std::invalid_argument("constraint_matrix: representations over different groups");
  const lie::MatrixGroup& group = rep_in.group();
  const lie::Representation map_rep =
      lie::Representation::product(rep_out, lie::Representation::dual(rep_in));
  const int m = map_rep.size();
  Eigen::MatrixXd C(static_cast<Eigen::Index>(group.dim()) * m, m);
  for (int i = 0; i < group.dim(); ++i)
    C.middleRows(static_cast<Eigen::Index>(i) * m, m) = map_rep.drho(group.generators[i]);
  return C;
}

Eigen::MatrixXd solve_basis(const Eigen::MatrixXd& C, double rel_tol) {
  if (!C.allFinite()) throw std::invalid_argument("solve_basis: constraint matrix has non-finite entries");
  const int m = static_cast<int>(C.cols());
  Eigen::VectorXd sv;
  Eigen::MatrixXd v;
  if (std::max(C.rows(), C.cols()) > 32) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeFullV);
    sv = svd.singularValues();
    v = svd.matrixV();
  } else {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeFullV);
    sv = svd.singularValues();
    v = svd.matrixV();
  }
  const double smax = sv.size() > 0 ? sv[0] : 0.0;
  if (smax == 0.0) return Eigen::MatrixXd::Identity(m, m);  // C == 0: everything is null
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv[i] >= rel_tol * smax) ++rank;
  return v.rightCols(m - rank);
}

EquivariantBasis solve_equivariant_basis(const lie::MatrixGroup& group,
                                         const lie::RepSignature& sig_in,
                                         const lie::RepSignature& sig_out) {
  // bases depend only on (group, signatures); repeated layers share one solve
  static std::mutex cache_mutex;
  static std::map<std::string, EquivariantBasis> cache;
  const std::string key = std::to_string(group.n) + "|" + sig_in.to_string() + "|" +
                          sig_out.to_string();
  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }

  const lie::Representation rep_in = lie::rep_from_signature(group, sig_in);
  const lie::Representation rep_out = lie::rep_from_signature(group, sig_out);
  EquivariantBasis basis;
  basis.sig_in = sig_in;
  basis.sig_out = sig_out;
  basis.size_in = rep_in.size();
  basis.size_out = rep_out.size();
  basis.Q = solve_basis(constraint_matrix(rep_in, rep_out));

  // invariant bias directions: nullspace of the stacked drho of the output rep
  const int m = rep_out.size();
  Eigen::MatrixXd Cb(static_cast<Eigen::Index>(group.dim()) * m, m);
  for (int i = 0; i < group.dim(); ++i)
    Cb.middleRows(static_cast<Eigen::Index>(i) * m, m) = rep_out.drho(group.generators[i]);
  basis.bias_Q = solve_basis(Cb);

  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    cache.emplace(key, basis);
  }
  return basis;
}

Eigen::VectorXd project(const EquivariantBasis& basis, const Eigen::VectorXd& v0) {
  if (v0.size() != static_cast<Eigen::Index>(basis.size_in) * basis.size_out)
    throw std::invalid_argument("project: vector length does not match size_out * size_in");
  return basis.Q * (basis.Q.transpose() * v0);
}

SignatureLayout SignatureLayout::of(const lie::RepSignature& sig, int n) {
  lie::RepSignature canon = sig;
  canon.normalize();
  SignatureLayout layout;
  int off = 0;
  for (const auto& [mult, rank] : canon.terms) {
    if (rank == 0) {
      layout.scalar_count += mult;
      off += mult;
      continue;
    }
    int block = 1;
    for (int k = 0; k < rank; ++k) block *= n;
    for (int c = 0; c < mult; ++c) {
      layout.blocks.emplace_back(off, block);
      off += block;
    }
  }
  layout.total = off;
  return layout;
}

namespace {
double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Eigen::VectorXd gated_nonlinearity(const lie::RepSignature& sig, int n,
                                   const Eigen::VectorXd& features,
                                   const Eigen::VectorXd& gates) {
  const SignatureLayout layout = SignatureLayout::of(sig, n);
  if (features.size() != layout.total)
    throw std::invalid_argument("gated_nonlinearity: feature length does not match signature");
  if (gates.size() != layout.gate_count())
    throw std::invalid_argument("gated_nonlinearity: expected one gate per non-scalar block");
  Eigen::VectorXd out(features.size());
  for (int i = 0; i < layout.scalar_count; ++i) out[i] = sigmoid_scalar(features[i]);
  for (size_t b = 0; b < layout.blocks.size(); ++b) {
    const auto [off, size] = layout.blocks[b];
    out.segment(off, size) = features.segment(off, size) * sigmoid_scalar(gates[b]);
  }
  return out;
}

ad::Var gated_nonlinearity(ad::Tape& tape, const SignatureLayout& layout, ad::Var features,
                           ad::Var gates) {
  if (tape.value(features).rows() != layout.total)
    throw std::invalid_argument("gated_nonlinearity: feature length does not match layout");
  if (tape.value(gates).rows() != layout.gate_count())
    throw std::invalid_argument("gated_nonlinearity: expected one gate per non-scalar block");
  std::vector<ad::Var> parts;
  if (layout.scalar_count > 0)
    parts.push_back(tape.sigmoid(tape.slice_rows(features, 0, layout.scalar_count)));
  const ad::Var gate_act = tape.sigmoid(gates);
  for (size_t b = 0; b < layout.blocks.size(); ++b) {
    const auto [off, size] = layout.blocks[b];
    const ad::Var block = tape.slice_rows(features, off, size);
    const ad::Var gate = tape.slice_rows(gate_act, static_cast<int>(b), 1);
    parts.push_back(tape.matmul(block, gate));  // (size x 1) * (1 x 1)
  }
  return parts.size() == 1 ? parts[0] : tape.vstack(parts);
}

// ---------------------------------------------------------------------------
// EquivariantLinear
// ---------------------------------------------------------------------------

std::shared_ptr<EquivariantLinear> EquivariantLinear::create(
    const lie::MatrixGroup& group, const lie::RepSignature& sig_in,
    const lie::RepSignature& sig_out, bool gated, const std::string& prefix,
    ad::ParamStore& params, Rng& rng) {
  auto layer = std::make_shared<EquivariantLinear>();
  layer->basis_ = solve_equivariant_basis(group, sig_in, sig_out);
  layer->layout_in_ = SignatureLayout::of(sig_in, group.n);
  layer->layout_out_ = SignatureLayout::of(sig_out, group.n);
  layer->gated_ = gated;
  layer->prefix_ = prefix;

  const EquivariantBasis& basis = layer->basis_;
  if (basis.rank() == 0 && basis.bias_rank() == 0)
    throw std::invalid_argument("EquivariantLinear: degenerate layer (" + sig_in.to_string() +
                                " -> " + sig_out.to_string() +
                                " admits no equivariant weight and no invariant bias); change "
                                "the signatures");

  // init: draw a full weight vector with std 1/sqrt(fan_in) and keep its
  // coefficients in the basis
  if (basis.rank() > 0) {
    const double std_init = 1.0 / std::sqrt(static_cast<double>(basis.size_in));
    const Eigen::VectorXd v0 = std_init * rng.normal_vector(basis.size_out * basis.size_in);
    params.create(prefix + ".w", basis.Q.transpose() * v0);
  }
  if (basis.bias_rank() > 0)
    params.create(prefix + ".b", Eigen::MatrixXd::Zero(basis.bias_rank(), 1));
  if (gated) {
    const int n_gates = layer->layout_out_.gate_count();
    if (n_gates > 0) {
      const int in_scalars = layer->layout_in_.scalar_count;
      if (in_scalars > 0)
        params.create(prefix + ".gw",
                      rng.normal_matrix(n_gates, in_scalars) / std::sqrt(double(in_scalars)));
      params.create(prefix + ".gb", Eigen::MatrixXd::Zero(n_gates, 1));
    }
  }
  return layer;
}

Eigen::MatrixXd EquivariantLinear::weight(const ad::ParamStore& params) const {
  if (basis_.rank() == 0) return Eigen::MatrixXd::Zero(basis_.size_out, basis_.size_in);
  const Eigen::VectorXd flat = basis_.Q * params.value(prefix_ + ".w");
  return unvec_rowmajor(flat, basis_.size_out, basis_.size_in);
}

ad::Var EquivariantLinear::forward(ad::Tape& tape, const ad::ParamStore& params,
                                   ad::Var x) const {
  ad::Var y;
  bool have_y = false;
  if (basis_.rank() > 0) {
    const ad::Var W = tape.memo(prefix_ + ".W", [&] {
      const ad::Var coeffs = tape.param(params, prefix_ + ".w");
      return tape.reshape_rowmajor(tape.matmul(tape.constant(basis_.Q), coeffs),
                                   basis_.size_out, basis_.size_in);
    });
    y = tape.matmul(W, x);
    have_y = true;
  }
  if (basis_.bias_rank() > 0) {
    const ad::Var bias = tape.memo(prefix_ + ".bias", [&] {
      return tape.matmul(tape.constant(basis_.bias_Q), tape.param(params, prefix_ + ".b"));
    });
    y = have_y ? tape.add(y, bias) : bias;
    have_y = true;
  }
  if (!have_y) y = tape.constant(Eigen::MatrixXd::Zero(basis_.size_out, 1));

  if (!gated_) return y;
  const int n_gates = layout_out_.gate_count();
  if (n_gates == 0) {
    // output is all scalars: plain pointwise nonlinearity
    return tape.sigmoid(y);
  }
  ad::Var gates;
  if (layout_in_.scalar_count > 0) {
    const ad::Var gw = tape.param(params, prefix_ + ".gw");
    const ad::Var gb = tape.param(params, prefix_ + ".gb");
    gates = tape.add(tape.matmul(gw, tape.slice_rows(x, 0, layout_in_.scalar_count)), gb);
  } else {
    gates = tape.param(params, prefix_ + ".gb");
  }
  return gated_nonlinearity(tape, layout_out_, y, gates);
}

int EquivariantLinear::free_parameter_count() const {
  int count = basis_.rank() + basis_.bias_rank();
  if (gated_ && layout_out_.gate_count() > 0) {
    count += layout_out_.gate_count();
    if (layout_in_.scalar_count > 0) count += layout_out_.gate_count() * layout_in_.scalar_count;
  }
  return count;
}

// ---------------------------------------------------------------------------
// DenseLinear
// ---------------------------------------------------------------------------

std::shared_ptr<DenseLinear> DenseLinear::create(int in_size, int out_size, bool gated,
                                                 const std::string& prefix,
                                                 ad::ParamStore& params, Rng& rng) {
  auto layer = std::make_shared<DenseLinear>();
  layer->in_ = in_size;
  layer->out_ = out_size;
  layer->gated_ = gated;
  layer->prefix_ = prefix;
  params.create(prefix + ".W", rng.normal_matrix(out_size, in_size) / std::sqrt(double(in_size)));
  params.create(prefix + ".b", Eigen::MatrixXd::Zero(out_size, 1));
  return layer;
}

ad::Var DenseLinear::forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const {
  const ad::Var W = tape.param(params, prefix_ + ".W");
  const ad::Var b = tape.param(params, prefix_ + ".b");
  ad::Var y = tape.add(tape.matmul(W, x), b);
  return gated_ ? tape.sigmoid(y) : y;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

Network Network::build(const lie::MatrixGroup& group, const NetworkSpec& spec,
                       const std::string& prefix, ad::ParamStore& params, Rng& rng) {
  if (spec.n_streams < 1) throw std::invalid_argument("Network: need at least one stream");
  if (spec.n_streams > 1 && spec.tail_layers.empty() && spec.stream_layers.empty())
    throw std::invalid_argument("Network: empty spec");

  auto make_layer = [&](const LayerSpec& ls, const std::string& name) -> LayerPtr {
    if (spec.ablation)
      return DenseLinear::create(ls.sig_in.size(group.n), ls.sig_out.size(group.n), ls.gated,
                                 name, params, rng);
    return EquivariantLinear::create(group, ls.sig_in, ls.sig_out, ls.gated, name, params, rng);
  };

  auto check_chain = [&](const std::vector<LayerSpec>& layers) {
    for (size_t i = 1; i < layers.size(); ++i)
      if (layers[i].sig_in.size(group.n) != layers[i - 1].sig_out.size(group.n))
        throw std::invalid_argument("Network: signature chain mismatch at layer " +
                                    std::to_string(i));
  };
  check_chain(spec.stream_layers);
  check_chain(spec.tail_layers);
  if (!spec.stream_layers.empty() && !spec.tail_layers.empty() &&
      spec.tail_layers.front().sig_in.size(group.n) !=
          spec.stream_layers.back().sig_out.size(group.n))
    throw std::invalid_argument("Network: signature mismatch across the pool");

  Network net;
  net.n_streams_ = spec.n_streams;
  net.softmax_head_ = spec.softmax_head;
  for (size_t l = 0; l < spec.stream_layers.size(); ++l) {
    std::vector<LayerPtr> per_stream;
    for (int s = 0; s < spec.n_streams; ++s)
      per_stream.push_back(make_layer(spec.stream_layers[l], prefix + ".lag" + std::to_string(s) +
                                                                 ".l" + std::to_string(l)));
    net.stream_layers_.push_back(std::move(per_stream));
  }
  for (size_t l = 0; l < spec.tail_layers.size(); ++l)
    net.tail_layers_.push_back(
        make_layer(spec.tail_layers[l], prefix + ".l" + std::to_string(l + spec.stream_layers.size())));
  return net;
}

ad::Var Network::forward(ad::Tape& tape, const ad::ParamStore& params,
                         const std::vector<ad::Var>& streams) const {
  if (static_cast<int>(streams.size()) != n_streams_)
    throw std::invalid_argument("Network::forward: expected " + std::to_string(n_streams_) +
                                " input streams");
  std::vector<ad::Var> current = streams;
  for (const auto& per_stream : stream_layers_)
    for (int s = 0; s < n_streams_; ++s)
      current[s] = per_stream[s]->forward(tape, params, current[s]);
  ad::Var x = current.size() == 1 ? current[0] : tape.average(current);
  for (const auto& layer : tail_layers_) x = layer->forward(tape, params, x);
  if (softmax_head_) x = tape.softmax(x);
  return x;
}

ad::Var Network::forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) const {
  return forward(tape, params, std::vector<ad::Var>{x});
}

Eigen::VectorXd Network::forward_plain(const ad::ParamStore& params,
                                       const std::vector<Eigen::VectorXd>& streams) const {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(streams.size());
  for (const auto& s : streams) vars.push_back(tape.constant(s));
  return tape.value(forward(tape, params, vars));
}

Eigen::VectorXd Network::forward_plain(const ad::ParamStore& params,
                                       const Eigen::VectorXd& x) const {
  return forward_plain(params, std::vector<Eigen::VectorXd>{x});
}

int Network::in_size() const {
  if (!stream_layers_.empty()) return stream_layers_.front().front()->in_size();
  if (!tail_layers_.empty()) return tail_layers_.front()->in_size();
  return 0;
}

int Network::out_size() const {
  if (!tail_layers_.empty()) return tail_layers_.back()->out_size();
  if (!stream_layers_.empty()) return stream_layers_.back().front()->out_size();
  return 0;
}

int Network::free_parameter_count() const {
  int count = 0;
  for (const auto& per_stream : stream_layers_)
    for (const auto& layer : per_stream) count += layer->free_parameter_count();
  for (const auto& layer : tail_layers_) count += layer->free_parameter_count();
  return count;
}

lie::RepSignature hidden_signature(int width, int n) {
  if (width <= 0) throw std::invalid_argument("hidden_signature: width must be positive");
  int vectors = width / (n + 1);
  if (vectors == 0 && width >= n) vectors = 1;
  const int scalars = width - n * vectors;
  lie::RepSignature sig;
  if (scalars > 0) sig.terms.emplace_back(scalars, 0);
  if (vectors > 0) sig.terms.emplace_back(vectors, 1);
  sig.normalize();
  return sig;
}

}  // namespace eqddm::eqv
