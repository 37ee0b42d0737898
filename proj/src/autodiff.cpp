#include "eqddm/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace eqddm::ad {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

void ParamStore::create(const std::string& name, const Eigen::MatrixXd& init) {
  if (name.empty()) throw std::invalid_argument("ParamStore::create: empty name");
  if (entries_.count(name)) throw std::invalid_argument("ParamStore::create: duplicate name '" + name + "'");
  Entry e;
  e.value = init;
  e.m = Eigen::MatrixXd::Zero(init.rows(), init.cols());
  e.v = Eigen::MatrixXd::Zero(init.rows(), init.cols());
  entries_.emplace(name, std::move(e));
}

const Eigen::MatrixXd& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  return it->second.value;
}

void ParamStore::set_value(const std::string& name, const Eigen::MatrixXd& v) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  if (v.rows() != it->second.value.rows() || v.cols() != it->second.value.cols())
    throw std::invalid_argument("ParamStore::set_value: shape change for '" + name + "'");
  it->second.value = v;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

int ParamStore::total_size() const {
  int total = 0;
  for (const auto& [name, e] : entries_) total += static_cast<int>(e.value.size());
  return total;
}

void ParamStore::adam_step(const std::map<std::string, Eigen::MatrixXd>& grads,
                           const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
    Entry& e = it->second;
    if (g.rows() != e.value.rows() || g.cols() != e.value.cols())
      throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
    if (!g.allFinite())
      throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
    e.step += 1;
    e.m = cfg.beta1 * e.m + (1.0 - cfg.beta1) * g;
    e.v = cfg.beta2 * e.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
    const Eigen::ArrayXXd mhat = e.m.array() / bc1;
    const Eigen::ArrayXXd vhat = e.v.array() / bc2;
    e.value.array() -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    if (!e.value.allFinite())
      throw std::runtime_error("adam_step: non-finite value for parameter '" + name + "' after update");
  }
}

namespace {

constexpr char kMagic[8] = {'E', 'Q', 'D', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t x) {
  out.write(reinterpret_cast<const char*>(&x), sizeof(x));
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t x = 0;
  in.read(reinterpret_cast<char*>(&x), sizeof(x));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return x;
}

}  // namespace

void ParamStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(e.value.rows()));
    write_u32(out, static_cast<std::uint32_t>(e.value.cols()));
    for (Eigen::Index i = 0; i < e.value.rows(); ++i)
      for (Eigen::Index j = 0; j < e.value.cols(); ++j) {
        const double x = e.value(i, j);
        out.write(reinterpret_cast<const char*>(&x), sizeof(x));
      }
  }
  if (!out) throw std::runtime_error("checkpoint: write failure on '" + path + "'");
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint32_t count = read_u32(in);
  ParamStore store;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    Eigen::MatrixXd value(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) {
        double x;
        in.read(reinterpret_cast<char*>(&x), sizeof(x));
        value(i, j) = x;
      }
    if (!in) throw std::runtime_error("checkpoint: truncated record in '" + path + "'");
    store.create(name, value);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Var Tape::make(Eigen::MatrixXd value, bool needs_grad,
               std::function<void(Tape&, const Eigen::MatrixXd&)> pull) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  node.pull = std::move(pull);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_same_tape(Var a) const {
  if (a.tape != this || a.id < 0 || a.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("Tape: variable does not belong to this tape");
}

void Tape::accumulate(int id, const Eigen::MatrixXd& g) {
  Node& node = nodes_[id];
  if (!node.needs_grad) return;
  if (node.grad.size() == 0)
    node.grad = g;
  else
    node.grad += g;
}

Var Tape::constant(const Eigen::MatrixXd& value) { return make(value, false, nullptr); }

Var Tape::constant_scalar(double value) {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = value;
  return make(m, false, nullptr);
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = make(store.value(name), true, nullptr);
  param_nodes_.emplace(name, v.id);
  return v;
}

Var Tape::input(const Eigen::MatrixXd& value) { return make(value, true, nullptr); }

Var Tape::memo(const std::string& key, const std::function<Var()>& build) {
  auto it = memo_nodes_.find(key);
  if (it != memo_nodes_.end()) return Var{this, it->second};
  Var v = build();
  check_same_tape(v);
  memo_nodes_.emplace(key, v.id);
  return v;
}

const Eigen::MatrixXd& Tape::value(Var v) const {
  check_same_tape(v);
  return nodes_[v.id].value;
}

Eigen::MatrixXd Tape::grad(Var v) const {
  check_same_tape(v);
  const Node& node = nodes_[v.id];
  if (node.grad.size() == 0)
    return Eigen::MatrixXd::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

namespace {
void require_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
}  // namespace

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_same_shape(val(a.id), val(b.id), "add");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  return make(val(ia) + val(ib), ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_same_shape(val(a.id), val(b.id), "sub");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  return make(val(ia) - val(ib), ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var Tape::neg(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  return make(-val(ia), nodes_[ia].needs_grad,
              [ia](Tape& t, const Eigen::MatrixXd& g) { t.accumulate(ia, -g); });
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_same_shape(val(a.id), val(b.id), "mul");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  return make(val(ia).cwiseProduct(val(ib)), ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g.cwiseProduct(t.val(ib)));
    t.accumulate(ib, g.cwiseProduct(t.val(ia)));
  });
}

Var Tape::cw_quotient(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_same_shape(val(a.id), val(b.id), "cw_quotient");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  return make(val(ia).cwiseQuotient(val(ib)), ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    const Eigen::MatrixXd inv_b = t.val(ib).cwiseInverse();
    t.accumulate(ia, g.cwiseProduct(inv_b));
    t.accumulate(ib, -g.cwiseProduct(t.val(ia)).cwiseProduct(inv_b).cwiseProduct(inv_b));
  });
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a);
  const int ia = a.id;
  return make(c * val(ia), nodes_[ia].needs_grad,
              [ia, c](Tape& t, const Eigen::MatrixXd& g) { t.accumulate(ia, c * g); });
}

Var Tape::add_scalar(Var a, double c) {
  check_same_tape(a);
  const int ia = a.id;
  return make(val(ia).array() + c, nodes_[ia].needs_grad,
              [ia](Tape& t, const Eigen::MatrixXd& g) { t.accumulate(ia, g); });
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (val(a.id).cols() != val(b.id).rows())
    throw std::invalid_argument("matmul: inner dimensions do not match");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  return make(val(ia) * val(ib), ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g * t.val(ib).transpose());
    t.accumulate(ib, t.val(ia).transpose() * g);
  });
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  Eigen::MatrixXd s(1, 1);
  s(0, 0) = val(ia).sum();
  return make(s, nodes_[ia].needs_grad, [ia](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, Eigen::MatrixXd::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0)));
  });
}

Var Tape::slice_rows(Var a, int row0, int nrows) {
  check_same_tape(a);
  const int ia = a.id;
  if (row0 < 0 || nrows < 0 || row0 + nrows > val(ia).rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  return make(val(ia).middleRows(row0, nrows), nodes_[ia].needs_grad,
              [ia, row0, nrows](Tape& t, const Eigen::MatrixXd& g) {
                Eigen::MatrixXd full =
                    Eigen::MatrixXd::Zero(t.val(ia).rows(), t.val(ia).cols());
                full.middleRows(row0, nrows) = g;
                t.accumulate(ia, full);
              });
}

Var Tape::vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no parts");
  Eigen::Index cols = -1;
  Eigen::Index rows = 0;
  bool ng = false;
  std::vector<int> ids;
  for (Var p : parts) {
    check_same_tape(p);
    if (cols < 0) cols = val(p.id).cols();
    if (val(p.id).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
    rows += val(p.id).rows();
    ng = ng || nodes_[p.id].needs_grad;
    ids.push_back(p.id);
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index off = 0;
  for (int id : ids) {
    out.middleRows(off, val(id).rows()) = val(id);
    off += val(id).rows();
  }
  return make(out, ng, [ids](Tape& t, const Eigen::MatrixXd& g) {
    Eigen::Index off = 0;
    for (int id : ids) {
      t.accumulate(id, g.middleRows(off, t.val(id).rows()));
      off += t.val(id).rows();
    }
  });
}

Var Tape::average(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("average: no parts");
  Var acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

Var Tape::reshape_rowmajor(Var a, int rows, int cols) {
  check_same_tape(a);
  const int ia = a.id;
  const Eigen::MatrixXd& v = val(ia);
  if (v.cols() != 1 || v.rows() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("reshape_rowmajor: expects a (rows*cols) x 1 vector");
  Eigen::MatrixXd out(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out(i, j) = v(static_cast<Eigen::Index>(i) * cols + j, 0);
  return make(out, nodes_[ia].needs_grad, [ia, rows, cols](Tape& t, const Eigen::MatrixXd& g) {
    Eigen::MatrixXd flat(static_cast<Eigen::Index>(rows) * cols, 1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) flat(static_cast<Eigen::Index>(i) * cols + j, 0) = g(i, j);
    t.accumulate(ia, flat);
  });
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  const Eigen::MatrixXd s =
      val(ia).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return make(s, nodes_[ia].needs_grad, [ia, s](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Var Tape::softplus(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  const Eigen::MatrixXd out = val(ia).unaryExpr([](double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
  });
  return make(out, nodes_[ia].needs_grad, [ia](Tape& t, const Eigen::MatrixXd& g) {
    const Eigen::MatrixXd s =
        t.val(ia).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accumulate(ia, g.cwiseProduct(s));
  });
}

Var Tape::log(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  return make(val(ia).array().log().matrix(), nodes_[ia].needs_grad,
              [ia](Tape& t, const Eigen::MatrixXd& g) {
                t.accumulate(ia, g.cwiseQuotient(t.val(ia)));
              });
}

Var Tape::exp(Var a) {
  check_same_tape(a);
  const int ia = a.id;
  const Eigen::MatrixXd e = val(ia).array().exp().matrix();
  return make(e, nodes_[ia].needs_grad, [ia, e](Tape& t, const Eigen::MatrixXd& g) {
    t.accumulate(ia, g.cwiseProduct(e));
  });
}

Var Tape::xlogy(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_same_shape(val(a.id), val(b.id), "xlogy");
  const int ia = a.id, ib = b.id;
  const bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  Eigen::MatrixXd out(val(ia).rows(), val(ia).cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      const double x = val(ia)(i, j);
      out(i, j) = x == 0.0 ? 0.0 : x * std::log(val(ib)(i, j));
    }
  return make(out, ng, [ia, ib](Tape& t, const Eigen::MatrixXd& g) {
    Eigen::MatrixXd ga(g.rows(), g.cols());
    Eigen::MatrixXd gb(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        const double x = t.val(ia)(i, j);
        const double y = std::max(t.val(ib)(i, j), 1e-300);
        ga(i, j) = g(i, j) * std::log(y);
        gb(i, j) = x == 0.0 ? 0.0 : g(i, j) * x / y;
      }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

Var Tape::softmax(Var a) {
  check_same_tape(a);
  if (val(a.id).cols() != 1) throw std::invalid_argument("softmax: expects a column vector");
  const int ia = a.id;
  const Eigen::VectorXd x = val(ia).col(0);
  const double m = x.maxCoeff();
  Eigen::VectorXd y = (x.array() - m).exp();
  y /= y.sum();
  const Eigen::MatrixXd ym = y;
  return make(ym, nodes_[ia].needs_grad, [ia, ym](Tape& t, const Eigen::MatrixXd& g) {
    const double dot = (ym.cwiseProduct(g)).sum();
    t.accumulate(ia, ym.cwiseProduct((g.array() - dot).matrix()));
  });
}

Var Tape::logsumexp(Var a) {
  check_same_tape(a);
  if (val(a.id).cols() != 1) throw std::invalid_argument("logsumexp: expects a column vector");
  const int ia = a.id;
  const Eigen::VectorXd x = val(ia).col(0);
  const double m = x.maxCoeff();
  Eigen::MatrixXd out(1, 1);
  if (!std::isfinite(m)) {
    out(0, 0) = m;  // all -inf stays -inf
  } else {
    out(0, 0) = m + std::log((x.array() - m).exp().sum());
  }
  return make(out, nodes_[ia].needs_grad, [ia](Tape& t, const Eigen::MatrixXd& g) {
    const Eigen::VectorXd x = t.val(ia).col(0);
    const double m = x.maxCoeff();
    Eigen::VectorXd y = (x.array() - m).exp();
    y /= y.sum();
    t.accumulate(ia, g(0, 0) * y);
  });
}

Var Tape::gauss_logpdf(Var x, Var mu, Var sigma) {
  if ((value(sigma).array() <= 0.0).any())
    throw std::invalid_argument("gauss_logpdf: sigma must be positive elementwise");
  const double d = static_cast<double>(value(x).rows());
  Var z = cw_quotient(sub(x, mu), sigma);
  Var quad = sum(mul(z, z));
  Var logdet = sum(log(sigma));
  Var out = add(scale(quad, -0.5), neg(logdet));
  return add_scalar(out, -0.5 * d * std::log(2.0 * M_PI));
}

Var Tape::kl_gauss(Var mu1, Var sigma1, Var mu2, Var sigma2) {
  if ((value(sigma1).array() <= 0.0).any() || (value(sigma2).array() <= 0.0).any())
    throw std::invalid_argument("kl_gauss: sigma must be positive elementwise");
  const double d = static_cast<double>(value(mu1).rows());
  Var log_ratio = sub(sum(log(sigma2)), sum(log(sigma1)));
  Var dm = cw_quotient(sub(mu1, mu2), sigma2);
  Var sr = cw_quotient(sigma1, sigma2);
  Var quad = scale(add(sum(mul(dm, dm)), sum(mul(sr, sr))), 0.5);
  return add_scalar(add(log_ratio, quad), -0.5 * d);
}

Var Tape::kl_cat(Var p, Var q) {
  return sub(sum(xlogy(p, p)), sum(xlogy(p, q)));
}

Var Tape::reparam_sample(Var mu, Var sigma, const Eigen::VectorXd& eps) {
  if (value(mu).rows() != eps.size())
    throw std::invalid_argument("reparam_sample: noise dimension mismatch");
  return add(mu, mul(sigma, constant(eps)));
}

void Tape::backward(Var output) {
  check_same_tape(output);
  if (val(output.id).rows() != 1 || val(output.id).cols() != 1)
    throw std::invalid_argument("backward: output must be a 1x1 scalar");
  for (Node& node : nodes_) node.grad.resize(0, 0);
  nodes_[output.id].grad = Eigen::MatrixXd::Ones(1, 1);
  if (!nodes_[output.id].needs_grad) return;
  for (int id = output.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.grad.size() == 0 || !node.pull) continue;
    node.pull(*this, node.grad);
  }
}

std::map<std::string, Eigen::MatrixXd> Tape::param_grads() const {
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& [name, id] : param_nodes_) {
    const Node& node = nodes_[id];
    if (node.grad.size() == 0)
      out.emplace(name, Eigen::MatrixXd::Zero(node.value.rows(), node.value.cols()));
    else
      out.emplace(name, node.grad);
  }
  return out;
}

std::map<std::string, Eigen::MatrixXd> grad(Tape& tape, Var scalar_output) {
  tape.backward(scalar_output);
  return tape.param_grads();
}

}  // namespace eqddm::ad
