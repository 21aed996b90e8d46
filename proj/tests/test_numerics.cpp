#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "avg/numerics/checkpoint.hpp"
#include "doctest.h"
#include "support/op_cases.hpp"

using namespace avg;
using namespace avg::numerics;

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> t;
  auto y = softmax(t.constant(MatrixD::Zero(1, 2)));
  CHECK(y.value()(0, 0) == doctest::Approx(0.5));
  CHECK(y.value()(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("squared_l2 of a hand-sized difference") {
  Tape<double> t;
  MatrixD a(1, 2), b(1, 2);
  a << 0.9, 0.2;
  b << 1.0, 0.0;
  auto l = squared_l2(sub(t.constant(a), t.constant(b)));
  CHECK(l.scalar() == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("cross_entropy of uniform logits is ln V") {
  for (int v : {2, 7, 2027}) {
    Tape<double> t;
    std::vector<int> tgt = {v - 1};
    auto l = cross_entropy(t.constant(MatrixD::Constant(1, v, 0.3)), std::span<const int>(tgt));
    CHECK(l.scalar() == doctest::Approx(std::log(v)).epsilon(1e-12));
  }
}

TEST_CASE("shape errors name both shapes") {
  Tape<float> t;
  auto a = t.constant(MatrixF::Zero(2, 3));
  auto b = t.constant(MatrixF::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("backward of sum is ones and of ||x||^2 is 2x") {
  std::mt19937_64 rng(3);
  MatrixD x = testing::random_matrix(rng, 3, 2);
  {
    Tape<double> t;
    auto v = t.variable(x);
    t.backward(sum(v));
    CHECK(t.gradient(v).isApprox(MatrixD::Ones(3, 2)));
  }
  {
    Tape<double> t;
    auto v = t.variable(x);
    t.backward(squared_l2(v));
    CHECK(t.gradient(v).isApprox(2.0 * x));
  }
}

TEST_CASE("non-scalar loss is a usage error; unreached params get zero") {
  Tape<double> t;
  auto a = t.variable(MatrixD::Ones(2, 2));
  auto unused = t.variable(MatrixD::Ones(3, 1));
  CHECK_THROWS_AS(t.backward(a), UsageError);
  t.backward(sum(a));
  CHECK(t.gradient(unused).isZero());
}

TEST_CASE("gather_rows scatters only into selected rows") {
  std::mt19937_64 rng(5);
  Tape<double> t;
  auto table = t.variable(testing::random_matrix(rng, 6, 3));
  std::vector<int> ids = {1, 4, 1};
  t.backward(sum(gather_rows(table, std::span<const int>(ids))));
  const MatrixD g = t.gradient(table);
  for (int r : {0, 2, 3, 5}) CHECK(g.row(r).isZero(0.0));
  CHECK(g.row(1).isApprox(RowVector<double>::Constant(3, 2.0)));
  CHECK(g.row(4).isApprox(RowVector<double>::Constant(3, 1.0)));
}

TEST_CASE("softmax sums to one and log_softmax matches log of softmax") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> t;
    auto x = t.constant(testing::random_matrix(rng, 4, 9, 3.0));
    auto p = softmax(x);
    auto lp = log_softmax(x);
    for (Index r = 0; r < 4; ++r) CHECK(std::abs(p.value().row(r).sum() - 1.0) < 1e-6);
    CHECK((lp.value() - p.value().array().log().matrix()).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("linear function gradient check is at machine precision") {
  ParameterSet<double> p;
  p.add("w", MatrixD::Constant(2, 3, 0.5));
  LossFn f = [](const ParameterSet<double>& ps, Gradients<double>* g) {
    Tape<double> t;
    auto w = t.parameter(ps["w"]);
    MatrixD c(2, 3);
    c << 1, -2, 3, 0.5, 4, -1;
    auto loss = sum(mul(w, t.constant(c)));
    if (g) {
      t.backward(loss);
      (*g)["w"] = t.gradient(w);
    }
    return loss.scalar();
  };
  auto report = finite_difference_check(f, p, 1e-4, 1e-4);
  CHECK(report.pass);
  CHECK(report.worst < 1e-9);
}

TEST_CASE("every differentiable op passes finite differences on 100 seeded cases") {
  for (const auto& op : testing::differentiable_ops()) {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
      auto c = testing::make_op_case(op, seed);
      worst = std::max(worst, finite_difference_check(c.loss, c.params, 1e-4, 1e-4).worst);
    }
    INFO(op << " worst relative error " << worst);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("random three-layer composite matches finite differences") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterSet<double> p;
    p.add("w1", testing::random_matrix(rng, 4, 6, 0.5));
    p.add("b1", testing::random_matrix(rng, 1, 6, 0.1));
    p.add("w2", testing::random_matrix(rng, 6, 5, 0.5));
    p.add("g", testing::random_matrix(rng, 1, 5));
    p.add("b", testing::random_matrix(rng, 1, 5));
    p.add("w3", testing::random_matrix(rng, 5, 3, 0.5));
    const MatrixD x = testing::random_matrix(rng, 2, 4);
    LossFn f = [x](const ParameterSet<double>& ps, Gradients<double>* g) {
      Tape<double> t;
      std::map<std::string, Var<double>> v;
      for (const auto& [n, m] : ps) v.emplace(n, t.parameter(m));
      auto h = relu(add_bias(matmul(t.constant(x), v["w1"]), v["b1"]));
      auto h2 = layer_norm(matmul(h, v["w2"]), v["g"], v["b"]);
      std::vector<int> tg = {2, 0};
      auto loss = cross_entropy(matmul(h2, v["w3"]), std::span<const int>(tg));
      if (g) {
        t.backward(loss);
        for (auto& [n, var] : v) (*g)[n] = t.gradient(var);
      }
      return loss.scalar();
    };
    auto report = finite_difference_check(f, p, 1e-4, 1e-4);
    INFO("seed " << seed << " worst " << report.worst);
    CHECK(report.pass);
  }
}

TEST_CASE("adam: zero gradient leaves params, first step moves by about lr") {
  ParameterSet<float> p;
  p.add("w", MatrixF::Constant(2, 2, 1.0f));
  auto st = AdamState<float>::for_parameters(p, AdamHyper{.lr = 1e-3});
  Gradients<float> zero;
  zero["w"] = MatrixF::Zero(2, 2);
  adam_update(p, zero, st);
  CHECK(p["w"].isApprox(MatrixF::Constant(2, 2, 1.0f)));

  ParameterSet<double> q;
  q.add("w", MatrixD::Zero(1, 3));
  auto sq = AdamState<double>::for_parameters(q, AdamHyper{.lr = 1e-3});
  Gradients<double> g;
  g["w"] = MatrixD::Constant(1, 3, 0.37);
  adam_update(q, g, sq);
  // step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  CHECK(q["w"](0, 0) == doctest::Approx(-1e-3 * 0.37 / (0.37 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam without state is a usage error; identical runs are bit-identical") {
  ParameterSet<float> p;
  p.add("w", MatrixF::Ones(1, 2));
  AdamState<float> empty;
  Gradients<float> g;
  g["w"] = MatrixF::Ones(1, 2);
  CHECK_THROWS_AS(adam_update(p, g, empty), UsageError);

  auto run = [] {
    std::mt19937_64 rng(9);
    ParameterSet<float> q;
    q.add("w", testing::random_matrix(rng, 3, 3).cast<float>());
    auto st = AdamState<float>::for_parameters(q, AdamHyper{});
    for (int i = 0; i < 50; ++i) {
      Gradients<float> gr;
      gr["w"] = (q["w"].array() * q["w"].array() - 0.5f).matrix();
      adam_update(q, gr, st);
    }
    return q;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round-trips bit-exactly and rejects bad magic") {
  const auto dir = std::filesystem::temp_directory_path() / "avg_test_ckpt";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(1);
  ParameterSet<float> p;
  p.add("enc.w", testing::random_matrix(rng, 3, 5).cast<float>());
  p.add("b", testing::random_matrix(rng, 1, 4).cast<float>());
  write_checkpoint(dir / "w.avgw", p);
  CHECK(read_checkpoint(dir / "w.avgw") == p);

  std::ofstream(dir / "bad.avgw", std::ios::binary) << "NOPE0000";
  CHECK_THROWS_AS(read_checkpoint(dir / "bad.avgw"), FormatError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.avgw"), DependencyError);
}

TEST_CASE("dropout: rate 0 is the identity, masks are inverted and carry the gradient") {
  std::mt19937_64 rng(4);
  Tape<double> tape;
  auto x = tape.variable(MatrixD::Constant(200, 50, 2.0));
  CHECK(numerics::dropout(x, 0.0, rng).value() == x.value());
  auto y = numerics::dropout(x, 0.25, rng);
  int zeros = 0;
  for (Index i = 0; i < y.value().size(); ++i) {
    const double v = y.value().data()[i];
    CHECK((v == 0.0 || v == doctest::Approx(2.0 / 0.75)));
    zeros += v == 0.0;
  }
  CHECK(zeros / 10000.0 == doctest::Approx(0.25).epsilon(0.05));
  tape.backward(numerics::sum(y));
  const MatrixD g = tape.gradient(x);
  for (Index i = 0; i < g.size(); ++i) {
    const double expect = y.value().data()[i] == 0.0 ? 0.0 : 1 / 0.75;
    CHECK(g.data()[i] == doctest::Approx(expect));
  }
  CHECK_THROWS_AS(numerics::dropout(x, 1.0, rng), UsageError);
}
