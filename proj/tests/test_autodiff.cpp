#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "eqddm/autodiff.hpp"
#include "eqddm/rng.hpp"
#include "oracle_helpers.hpp"

using namespace eqddm;

TEST_SUITE("autodiff") {

TEST_CASE("grad of w^T w") {
  ad::ParamStore ps;
  Eigen::MatrixXd w(2, 1);
  w << 1.0, 2.0;
  ps.create("w", w);
  ad::Tape tape;
  const ad::Var v = tape.param(ps, "w");
  const ad::Var loss = tape.sum(tape.mul(v, v));
  auto grads = ad::grad(tape, loss);
  CHECK(grads.at("w")(0, 0) == 2.0);
  CHECK(grads.at("w")(1, 0) == 4.0);
}

TEST_CASE("constant output has zero gradients") {
  ad::ParamStore ps;
  ps.create("w", Eigen::MatrixXd::Ones(3, 1));
  ad::Tape tape;
  tape.param(ps, "w");
  const ad::Var c = tape.constant_scalar(5.0);
  tape.backward(c);
  auto grads = tape.param_grads();
  CHECK(grads.at("w").norm() == 0.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
  ad::Tape tape;
  const ad::Var v = tape.input(Eigen::MatrixXd::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
}

TEST_CASE("every op passes a randomized finite-difference check") {
  Rng rng(2024);
  // each case: a scalar loss built from one focal op over named parameters
  using Builder = std::function<ad::Var(ad::Tape&, const ad::ParamStore&)>;
  struct OpCase {
    const char* name;
    int n_params;
    int rows;
    bool positive;  // parameters must stay positive (sigma-like)
    Builder build;
  };

  auto p = [](ad::Tape& t, const ad::ParamStore& ps, int i) {
    return t.param(ps, "p" + std::to_string(i));
  };

  const std::vector<OpCase> cases = {
      {"add", 2, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.add(p(t, ps, 0), p(t, ps, 1))); }},
      {"sub_neg", 2, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.sum(t.neg(t.sub(p(t, ps, 0), p(t, ps, 1))));
       }},
      {"mul", 2, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.mul(p(t, ps, 0), p(t, ps, 1))); }},
      {"cw_quotient", 2, 4, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.sum(t.cw_quotient(p(t, ps, 0), p(t, ps, 1)));
       }},
      {"matmul", 2, 3, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         // (1x3 reshaped) times (3x1)
         const ad::Var a = t.reshape_rowmajor(p(t, ps, 0), 1, 3);
         return t.sum(t.matmul(a, p(t, ps, 1)));
       }},
      {"scale_addscalar", 1, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.sum(t.add_scalar(t.scale(p(t, ps, 0), -1.7), 0.3));
       }},
      {"slice_vstack", 1, 6, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         const ad::Var a = t.slice_rows(p(t, ps, 0), 0, 3);
         const ad::Var b = t.slice_rows(p(t, ps, 0), 3, 3);
         return t.sum(t.mul(t.vstack({b, a}), t.vstack({a, b})));
       }},
      {"average", 2, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.sum(t.average({p(t, ps, 0), p(t, ps, 1)}));
       }},
      {"sigmoid", 1, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.sigmoid(p(t, ps, 0))); }},
      {"softplus", 1, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.softplus(p(t, ps, 0))); }},
      {"log", 1, 4, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.log(p(t, ps, 0))); }},
      {"exp", 1, 4, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.sum(t.exp(p(t, ps, 0))); }},
      {"xlogy", 2, 4, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.sum(t.xlogy(p(t, ps, 0), p(t, ps, 1)));
       }},
      {"softmax", 1, 5, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         const ad::Var w = t.constant((Eigen::VectorXd(5) << 1, -2, 0.5, 3, -1).finished());
         return t.sum(t.mul(t.softmax(p(t, ps, 0)), w));
       }},
      {"logsumexp", 1, 5, false,
       [&](ad::Tape& t, const ad::ParamStore& ps) { return t.logsumexp(p(t, ps, 0)); }},
      {"gauss_logpdf", 3, 3, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.gauss_logpdf(p(t, ps, 0), p(t, ps, 1), p(t, ps, 2));
       }},
      {"kl_gauss", 4, 3, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         return t.kl_gauss(p(t, ps, 0), p(t, ps, 1), p(t, ps, 2), p(t, ps, 3));
       }},
      {"kl_cat", 2, 3, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         // softmax keeps the arguments on the simplex
         return t.kl_cat(t.softmax(p(t, ps, 0)), t.softmax(p(t, ps, 1)));
       }},
      {"reparam", 2, 3, true,
       [&](ad::Tape& t, const ad::ParamStore& ps) {
         const Eigen::VectorXd eps = (Eigen::VectorXd(3) << 0.3, -1.2, 0.7).finished();
         return t.sum(t.reparam_sample(p(t, ps, 0), p(t, ps, 1), eps));
       }},
  };

  for (const auto& op : cases) {
    CAPTURE(op.name);
    for (int probe = 0; probe < 20; ++probe) {
      ad::ParamStore ps;
      for (int i = 0; i < op.n_params; ++i) {
        Eigen::MatrixXd v = rng.normal_matrix(op.rows, 1);
        if (op.positive) v = v.array().abs() + 0.5;
        ps.create("p" + std::to_string(i), v);
      }
      ad::Tape tape;
      const ad::Var loss = op.build(tape, ps);
      tape.backward(loss);
      const auto grads = tape.param_grads();
      auto f = [&](const ad::ParamStore& store) {
        ad::Tape t2;
        return t2.value(op.build(t2, store))(0, 0);
      };
      const double worst = oracle::fd_worst_rel_error(f, ps, grads, 1e-5);
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("closed-form KL identities") {
  ad::Tape tape;
  const Eigen::VectorXd mu = (Eigen::VectorXd(2) << 0.3, -0.2).finished();
  const Eigen::VectorXd sig = (Eigen::VectorXd(2) << 0.7, 1.3).finished();
  const ad::Var kl_same =
      tape.kl_gauss(tape.constant(mu), tape.constant(sig), tape.constant(mu), tape.constant(sig));
  CHECK(tape.value(kl_same)(0, 0) == doctest::Approx(0.0).epsilon(1e-14));

  const Eigen::VectorXd p = (Eigen::VectorXd(3) << 0.2, 0.5, 0.3).finished();
  const ad::Var kl_cat_same = tape.kl_cat(tape.constant(p), tape.constant(p));
  CHECK(tape.value(kl_cat_same)(0, 0) == doctest::Approx(0.0).epsilon(1e-14));

  // KL(N(0,1) || N(1,1)) = 1/2
  const ad::Var half = tape.kl_gauss(
      tape.constant(Eigen::VectorXd::Zero(1)), tape.constant(Eigen::VectorXd::Ones(1)),
      tape.constant(Eigen::VectorXd::Ones(1)), tape.constant(Eigen::VectorXd::Ones(1)));
  CHECK(tape.value(half)(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

  // degenerate categorical entries contribute nothing
  const Eigen::VectorXd p0 = (Eigen::VectorXd(2) << 1.0, 0.0).finished();
  const ad::Var klz = tape.kl_cat(tape.constant(p0), tape.constant(p0));
  CHECK(tape.value(klz)(0, 0) == 0.0);
}

TEST_CASE("kl terms are non-negative on random simplex/gaussian inputs") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape tape;
    const ad::Var p = tape.softmax(tape.constant(rng.normal_matrix(4, 1)));
    const ad::Var q = tape.softmax(tape.constant(rng.normal_matrix(4, 1)));
    CHECK(tape.value(tape.kl_cat(p, q))(0, 0) >= -1e-10);
    const Eigen::VectorXd m1 = rng.normal_vector(3), m2 = rng.normal_vector(3);
    const Eigen::VectorXd s1 = rng.normal_vector(3).array().abs() + 0.1;
    const Eigen::VectorXd s2 = rng.normal_vector(3).array().abs() + 0.1;
    const ad::Var kg = tape.kl_gauss(tape.constant(m1), tape.constant(s1), tape.constant(m2),
                                     tape.constant(s2));
    CHECK(tape.value(kg)(0, 0) >= -1e-10);
  }
}

TEST_CASE("gauss_logpdf rejects non-positive sigma") {
  ad::Tape tape;
  const ad::Var x = tape.constant(Eigen::VectorXd::Zero(2));
  const ad::Var bad = tape.constant((Eigen::VectorXd(2) << 1.0, 0.0).finished());
  CHECK_THROWS_AS(tape.gauss_logpdf(x, x, bad), std::invalid_argument);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ad::ParamStore ps;
  ps.create("w", Eigen::MatrixXd::Ones(3, 1));
  const Eigen::MatrixXd before = ps.value("w");
  std::map<std::string, Eigen::MatrixXd> grads{{"w", Eigen::MatrixXd::Zero(3, 1)}};
  ps.adam_step(grads, {});
  CHECK((ps.value("w") - before).norm() == 0.0);
}

TEST_CASE("adam: first step with constant gradient has magnitude ~ lr") {
  ad::ParamStore ps;
  ps.create("w", Eigen::MatrixXd::Zero(2, 1));
  std::map<std::string, Eigen::MatrixXd> grads{{"w", Eigen::MatrixXd::Constant(2, 1, 3.0)}};
  ad::AdamConfig cfg;
  cfg.lr = 0.05;
  ps.adam_step(grads, cfg);
  // bias-corrected first step is lr * g / (|g| + eps') ~ lr
  CHECK(std::abs(ps.value("w")(0, 0) + cfg.lr) < 1e-6);
}

TEST_CASE("adam: converges on a quadratic bowl") {
  ad::ParamStore ps;
  Eigen::MatrixXd w0(4, 1);
  w0 << 0.5, -0.3, 0.2, 0.4;
  ps.create("w", w0);
  ad::AdamConfig cfg;
  cfg.lr = 1e-2;
  for (int step = 0; step < 500; ++step) {
    ad::Tape tape;
    const ad::Var w = tape.param(ps, "w");
    const ad::Var loss = tape.sum(tape.mul(w, w));
    tape.backward(loss);
    ps.adam_step(tape.param_grads(), cfg);
  }
  CHECK(ps.value("w").norm() < 1e-3);
}

TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
  ad::ParamStore ps;
  ps.create("theta.bad", Eigen::MatrixXd::Ones(1, 1));
  std::map<std::string, Eigen::MatrixXd> grads{
      {"theta.bad", Eigen::MatrixXd::Constant(1, 1, std::numeric_limits<double>::quiet_NaN())}};
  try {
    ps.adam_step(grads, {});
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("theta.bad") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(9);
  ad::ParamStore ps;
  ps.create("a", rng.normal_matrix(3, 4));
  ps.create("b.c", rng.normal_matrix(1, 1));
  ps.create("z", rng.normal_matrix(7, 2));
  const std::string path1 = "ckpt_test_1.bin";
  const std::string path2 = "ckpt_test_2.bin";
  ps.save(path1);
  const ad::ParamStore loaded = ad::ParamStore::load(path1);
  for (const auto& name : ps.names()) {
    CHECK(loaded.has(name));
    CHECK((loaded.value(name) - ps.value(name)).norm() == 0.0);
  }
  loaded.save(path2);
  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  const std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);
  CHECK(!bytes1.empty());
  std::remove(path1.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint load rejects garbage") {
  const std::string path = "ckpt_garbage.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(ad::ParamStore::load(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("identical graphs give bitwise identical values and gradients") {
  auto run = [] {
    Rng rng(77);
    ad::ParamStore ps;
    ps.create("w", rng.normal_matrix(5, 1));
    ad::Tape tape;
    const ad::Var w = tape.param(ps, "w");
    const ad::Var loss = tape.logsumexp(tape.mul(tape.sigmoid(w), w));
    tape.backward(loss);
    return std::make_pair(tape.value(loss)(0, 0), tape.param_grads().at("w"));
  };
  const auto [v1, g1] = run();
  const auto [v2, g2] = run();
  CHECK(v1 == v2);
  CHECK((g1 - g2).norm() == 0.0);
}

TEST_CASE("param store rejects duplicates and shape changes") {
  ad::ParamStore ps;
  ps.create("w", Eigen::MatrixXd::Zero(2, 2));
  CHECK_THROWS_AS(ps.create("w", Eigen::MatrixXd::Zero(2, 2)), std::invalid_argument);
  CHECK_THROWS_AS(ps.set_value("w", Eigen::MatrixXd::Zero(3, 2)), std::invalid_argument);
  CHECK_THROWS_AS(ps.value("missing"), std::invalid_argument);
}

}  // TEST_SUITE
