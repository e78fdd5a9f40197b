#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "odelearn/dynamics.hpp"
#include "odelearn/eqlnet.hpp"
#include "support/oracles.hpp"

using namespace odelearn;
using namespace odelearn::eqlnet;
using odelearn::testing::TestRng;

namespace {

double forward1(const std::vector<double>& W1, const std::vector<double>& W2, std::size_t I, const OperatorSet& ops,
                const Eigen::VectorXd& z) {
  return neuron_forward<double>(std::span<const double>(W1), std::span<const double>(W2), I, ops, z);
}

// Direct evaluation of an operator neuron with explicit loops over nested vectors.
double neuron_oracle(const std::vector<std::vector<std::vector<double>>>& W1, const std::vector<std::vector<double>>& W2,
                     const std::vector<OpKind>& ops, const Eigen::VectorXd& z) {
  double out = 1.0;
  for (std::size_t i = 0; i < W2.size(); ++i) {
    double b = W2[i][ops.size()];
    for (std::size_t k = 0; k < ops.size(); ++k) {
      double a = 0.0;
      for (Eigen::Index l = 0; l < z.size(); ++l) a += W1[i][k][static_cast<std::size_t>(l)] * z[l];
      double v = 0.0;
      switch (ops[k]) {
        case OpKind::Identity: v = a; break;
        case OpKind::Sin: v = std::sin(a); break;
        case OpKind::Cos: v = std::cos(a); break;
        case OpKind::Square: v = a * a; break;
        case OpKind::Cube: v = a * a * a; break;
        case OpKind::Sqrt: v = a / std::pow(a * a + 1e-12, 0.25); break;
        case OpKind::Exp: v = std::exp(a); break;
        case OpKind::Tanh: v = std::tanh(a); break;
      }
      b += W2[i][k] * v;
    }
    out *= b;
  }
  return out;
}

OdeNetwork tank_network() {
  InputLayout in;
  in.n = 2;
  in.p = 1;
  in.raw_time = false;
  OdeNetwork net(OperatorSet::parse("identity,sqrt,square"), in, 2, {{9, 1}});
  Rng rng(3);
  net.init_random(rng);
  return net;
}

PriorKnowledge tank_prior(const dynamics::CascadedTank::Params& p) {
  PriorKnowledge prior;
  prior.situation = Situation::Partial;
  prior.terms = {{0, "sqrt(x1)", -p.k[0], false},
                 {0, "u1", p.k[3] * p.pump_gain, false},
                 {1, "sqrt(x1)", p.k[1], false},
                 {1, "sqrt(x2)", -p.k[2], false}};
  return prior;
}

}  // namespace

TEST_CASE("neuron forward examples") {
  const OperatorSet sin_only({OpKind::Sin});
  CHECK(forward1({0.0, 1.0}, {2.0, 0.0}, 1, sin_only, Eigen::Vector2d(1.0, std::numbers::pi / 2)) == 2.0);

  const OperatorSet id({OpKind::Identity});
  CHECK(forward1({0.0, 0.0, 0.0, 0.0}, {0.0, 2.0, 0.0, 3.0}, 2, id, Eigen::Vector2d(1.0, 0.7)) == 6.0);

  const OperatorSet idsq({OpKind::Identity, OpKind::Square});
  CHECK(forward1({0.0, 1.0, 0.0, 1.0}, {2.0, 1.0, 5.0}, 1, idsq, Eigen::Vector2d(1.0, 3.0)) == 20.0);

  CHECK_THROWS_AS(forward1({0.0}, {2.0, 0.0}, 1, sin_only, Eigen::Vector2d(1.0, 1.0)), ConfigError);
}

TEST_CASE("neuron forward matches a loop oracle") {
  TestRng rng(21);
  const std::vector<OpKind> all{OpKind::Identity, OpKind::Sin, OpKind::Cos, OpKind::Square,
                                OpKind::Cube,     OpKind::Sqrt, OpKind::Exp, OpKind::Tanh};
  for (int trial = 0; trial < 300; ++trial) {
    const auto I = static_cast<std::size_t>(rng.integer(1, 3));
    const auto K = static_cast<std::size_t>(rng.integer(1, 8));
    const auto O = static_cast<std::size_t>(rng.integer(1, 4));
    std::vector<OpKind> ops(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(K));
    std::vector<std::vector<std::vector<double>>> W1n(I, std::vector<std::vector<double>>(K, std::vector<double>(O + 1)));
    std::vector<std::vector<double>> W2n(I, std::vector<double>(K + 1));
    std::vector<double> W1, W2;
    for (auto& a : W1n)
      for (auto& b : a)
        for (auto& c : b) W1.push_back(c = rng.uniform(-1, 1));
    for (auto& a : W2n)
      for (auto& b : a) W2.push_back(b = rng.uniform(-1, 1));
    Eigen::VectorXd z(static_cast<Eigen::Index>(O + 1));
    z[0] = 1.0;
    for (std::size_t l = 1; l <= O; ++l) z[static_cast<Eigen::Index>(l)] = rng.uniform(-2, 2);
    const double expected = neuron_oracle(W1n, W2n, ops, z);
    CHECK(forward1(W1, W2, I, OperatorSet(ops), z) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("bias-only neuron is constant and branches scale the output") {
  TestRng rng(8);
  const OperatorSet ops({OpKind::Sin, OpKind::Square});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> W1(2 * 2 * 3);
    for (double& w : W1) w = rng.uniform(-1, 1);
    std::vector<double> W2{0.0, 0.0, rng.uniform(-2, 2)};
    const Eigen::Vector3d z1(1.0, rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Eigen::Vector3d z2(1.0, rng.uniform(-3, 3), rng.uniform(-3, 3));
    std::vector<double> W1a(W1.begin(), W1.begin() + 6);
    CHECK(forward1(W1a, W2, 1, ops, z1) == forward1(W1a, W2, 1, ops, z2));

    // two branches: scaling row i of W2 by s scales the output by s
    std::vector<double> V2(6);
    for (double& w : V2) w = rng.uniform(-1, 1);
    const double base = forward1(W1, V2, 2, ops, z1);
    const double s = rng.uniform(-3, 3);
    const std::size_t row = static_cast<std::size_t>(rng.integer(0, 1));
    auto scaled = V2;
    for (std::size_t k = 0; k < 3; ++k) scaled[row * 3 + k] *= s;
    CHECK(forward1(W1, scaled, 2, ops, z1) == doctest::Approx(s * base).epsilon(1e-12));
  }
}

TEST_CASE("division guard") {
  InputLayout in;
  in.n = 1;
  in.raw_time = false;
  OdeNetwork net(OperatorSet({OpKind::Identity}), in, 1, {{1, 1}}, 1e-3);
  Rng rng(1);
  net.init_random(rng);
  auto& p = net.params();
  TestRng trng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const double x = trng.uniform(-5, 5);
    const auto e = net.evaluate<double>(std::span<const double>(p), Eigen::VectorXd::Constant(1, x));
    CHECK(e.den[0] == 1.0);
    CHECK(e.out[0] == e.num[0]);
  }
  // denominator forced to delta / 2
  for (std::size_t j = 0; j < 2; ++j) p[net.w4_index(0, j)] = 0.0;
  p[net.w4_index(0, 0)] = 0.5e-3;
  const auto e = net.evaluate<double>(std::span<const double>(p), Eigen::VectorXd::Constant(1, 1.3));
  CHECK(e.out[0] == 0.0);
  p[net.w4_index(0, 0)] = 2.0;
  const auto f = net.evaluate<double>(std::span<const double>(p), Eigen::VectorXd::Constant(1, 1.3));
  CHECK(f.out[0] == doctest::Approx(f.num[0] / 2.0));
}

TEST_CASE("preconditioned single neuron reproduces x' = -x") {
  InputLayout in;
  in.n = 1;
  in.raw_time = true;
  OdeNetwork net(OperatorSet({OpKind::Identity, OpKind::Sin}), in, 1, {{3, 1}});
  Rng rng(12);
  net.init_random(rng);
  const auto pre = precondition(net, {Situation::Partial, {{0, "x1", -1.0, false}}});
  TestRng trng(5);
  double dev = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double x = trng.uniform(-5, 5);
    const auto y = pre.forward(Eigen::VectorXd::Constant(1, x), Eigen::VectorXd(0), Eigen::VectorXd(0), trng.uniform(0, 10));
    dev = std::max(dev, std::abs(y[0] + x));
  }
  CHECK(dev == 0.0);
}

TEST_CASE("forcing term preconditioning matches the direct formula") {
  const double b4 = 0.37, w0 = 0.83;
  for (bool raw_time : {true, false}) {
    InputLayout in;
    in.n = 2;
    in.raw_time = raw_time;
    if (!raw_time) in.omegas = {w0};
    OdeNetwork net(OperatorSet::parse("identity,cos,cube"), in, 2, {{4, 1}});
    Rng rng(2);
    net.init_random(rng);
    const auto pre = precondition(net, {Situation::Partial, {{1, "cos(" + dynamics::format_double(w0) + "*t)", -b4, false}}});
    TestRng trng(6);
    for (int i = 0; i < 100; ++i) {
      const double t = trng.uniform(0, 48);
      const auto y = pre.forward(Eigen::Vector2d::Zero(), Eigen::VectorXd(0), Eigen::VectorXd(0), t);
      CHECK(y[1] == doctest::Approx(-b4 * std::cos(w0 * t)).epsilon(1e-12));
      CHECK(y[0] == 0.0);
    }
  }
}

TEST_CASE("cascaded tank structure preconditions exactly") {
  dynamics::CascadedTank::Params p;
  dynamics::CascadedTank truth(p);
  const auto pre = precondition(tank_network(), tank_prior(p));
  TestRng trng(7);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d x(trng.uniform(0.01, 10), trng.uniform(0.01, 10));
    const Eigen::VectorXd u = Eigen::VectorXd::Constant(1, trng.uniform(0, 5));
    const auto y = pre.forward(x, u, Eigen::VectorXd(0), 0.0);
    const auto f = truth.f0(x, u, 0.0);
    CHECK((y - f).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("empty prior leaves the network unchanged") {
  auto net = tank_network();
  const auto pre = precondition(net, {});
  CHECK(pre.params() == net.params());
  CHECK(pre.frozen() == net.frozen());
}

TEST_CASE("capacity errors name the offending term") {
  InputLayout in;
  in.n = 2;
  in.raw_time = false;
  OdeNetwork net(OperatorSet::parse("identity,square"), in, 2, {{2, 2}});
  auto msg = [&](const PriorKnowledge& prior) {
    try {
      precondition(net, prior);
    } catch (const CapacityError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(msg({Situation::Partial, {{0, "sin(x1)", 1.0, false}}}).find("sin(x1)") != std::string::npos);
  CHECK(msg({Situation::Partial, {{0, "x1*x2*x1", 1.0, false}}}).find("x1*x2*x1") != std::string::npos);
  CHECK(msg({Situation::Partial, {{0, "x1", 1, false}, {0, "x2", 1, false}, {1, "x1^2", 1, false}}})
            .find("x1^2") != std::string::npos);
  CHECK(msg({Situation::Partial, {{0, "cos(0.5*t)", 1.0, false}}}).find("cos(0.5*t)") != std::string::npos);
  CHECK(msg({Situation::Partial, {{4, "x1", 1.0, false}}}).find("target") != std::string::npos);
  OdeNetwork deep(OperatorSet::parse("identity"), in, 2, {{2, 1}, {2, 1}});
  CHECK_THROWS_AS(precondition(deep, {Situation::Partial, {{0, "x1", 1.0, false}}}), CapacityError);
  CHECK(msg({Situation::Partial, {{0, "x1*x2", 2.0, false}, {1, "x1^3", 1.0, false}}}) == "");
}

TEST_CASE("cubic terms use the cube operator or repeated branches") {
  InputLayout in;
  in.n = 2;
  in.raw_time = false;
  TestRng trng(31);
  for (const char* ops : {"identity,cube", "identity"}) {
    OdeNetwork net(OperatorSet::parse(ops), in, 2, {{3, 3}});
    Rng rng(5);
    net.init_random(rng);
    const auto pre = precondition(
        net, {Situation::Partial, {{1, "x1^3", -0.4, false}, {1, "x2", -0.2, false}, {0, "x2", 1.0, false}}});
    for (int i = 0; i < 50; ++i) {
      const Eigen::Vector2d x(trng.uniform(-2, 2), trng.uniform(-2, 2));
      const auto y = pre.forward(x, Eigen::VectorXd(0), Eigen::VectorXd(0), 0.0);
      CHECK(y[0] == doctest::Approx(x[1]).epsilon(1e-14));
      CHECK(y[1] == doctest::Approx(-0.4 * std::pow(x[0], 3) - 0.2 * x[1]).epsilon(1e-12));
    }
  }
}

TEST_CASE("frozen masks") {
  dynamics::CascadedTank::Params p;
  auto prior = tank_prior(p);
  prior.terms[1].frozen = true;
  const auto net = tank_network();
  const auto pre = precondition(net, prior);
  CHECK(pre.frozen()[pre.w3_index(0, 2)] == 1);
  CHECK(pre.frozen()[pre.w3_index(0, 1)] == 0);
  for (std::size_t idx : pre.neuron_indices(0, 1)) CHECK(pre.frozen()[idx] == 1);
  for (std::size_t idx : pre.neuron_indices(0, 0)) CHECK(pre.frozen()[idx] == 0);

  prior.situation = Situation::ParametersOnly;
  const auto par = precondition(net, prior);
  std::size_t trainable = 0;
  for (auto f : par.frozen()) trainable += f == 0;
  CHECK(trainable == 3);
  CHECK(par.frozen()[par.w3_index(1, 4)] == 0);
}

TEST_CASE("regularizer examples") {
  const R0Params a{1.0, 10.0, 5.0, 0.01};
  CHECK(reg_r0(0.0, a) == doctest::Approx(1.0 / (1.0 + std::exp(5.0))).epsilon(1e-6));
  CHECK(reg_r0(0.0, a) == doctest::Approx(0.00669).epsilon(1e-3));
  CHECK(reg_r0(1.0, a) == doctest::Approx(1.00331).epsilon(1e-5));
  CHECK((reg_r0(1001.0, a) - reg_r0(1000.0, a)) == doctest::Approx(0.01).epsilon(1e-9));

  const double delta = 1e-3;
  const Eigen::Vector2d o(1.0, 2.0);
  auto r1 = [&](double target) {
    const Eigen::Vector2d w4(target, 0.0);
    return reg_r1<double>(o, w4, delta);
  };
  CHECK(r1(2 * delta) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r1(0.0) == doctest::Approx(delta).epsilon(1e-9));
  CHECK(r1(delta / 2) == doctest::Approx(delta / 2).epsilon(1e-9));
}

TEST_CASE("regularizer properties") {
  TestRng rng(13);
  const R0Params a{1.0, 10.0, 5.0, 0.01};
  for (int i = 0; i < 1000; ++i) {
    const double w = rng.uniform(-10, 10);
    CHECK(reg_r0(w, a) == reg_r0(-w, a));
    const double dw = rng.uniform(0, 1);
    CHECK(reg_r0(std::abs(w) + dw, a) >= reg_r0(std::abs(w), a));
    const Eigen::Vector3d o(1.0, rng.uniform(-5, 5), rng.uniform(-5, 5));
    const Eigen::Vector3d w4(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    CHECK(reg_r1<double>(o, w4, 1e-3) >= 0.0);
  }
}

TEST_CASE("extraction recovers the tank structure") {
  dynamics::CascadedTank::Params p;
  const auto pre = precondition(tank_network(), tank_prior(p));
  const auto ex = extract_expression(pre, 1e-3);
  const auto names = pre.inputs().names();
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].str(names) == "-0.5*sqrt(x1) + 0.2*u1");
  CHECK(ex[1].str(names) == "0.4*sqrt(x1) - 0.3*sqrt(x2)");
}

TEST_CASE("extraction of degenerate networks") {
  InputLayout in;
  in.n = 1;
  in.raw_time = false;
  OdeNetwork zero(OperatorSet::parse("identity,sin"), in, 2, {{3, 2}});
  for (double& w : zero.params()) w = 0.0;
  for (std::size_t m = 0; m < 2; ++m) zero.params()[zero.w4_index(m, 0)] = 1.0;
  for (const auto& e : extract_expression(zero, 1e-3)) {
    CHECK(e.is_const());
    CHECK(e.value == 0.0);
  }

  // one surviving sin branch: c1*sin(c2*x1 + c3)
  OdeNetwork net(OperatorSet::parse("identity,sin"), in, 1, {{1, 1}});
  auto& w = net.params();
  std::fill(w.begin(), w.end(), 0.0);
  w[net.w1_index(0, 0, 0, 1, 0)] = 0.25;
  w[net.w1_index(0, 0, 0, 1, 1)] = 1.5;
  w[net.w2_index(0, 0, 0, 1)] = 1.0;
  w[net.w3_index(0, 1)] = 2.0;
  w[net.w4_index(0, 0)] = 1.0;
  const auto ex = extract_expression(net, 1e-3);
  CHECK(ex[0].str(in.names()) == "2*sin(1.5*x1 + 0.25)");
  REQUIRE(ex[0].kind == Expr::Kind::Product);
  CHECK(ex[0].args[1].kind == Expr::Kind::Apply);
  CHECK(ex[0].args[1].op == OpKind::Sin);
}

TEST_CASE("extracted expressions evaluate like the pruned network") {
  TestRng trng(99);
  for (int trial = 0; trial < 30; ++trial) {
    InputLayout in;
    in.n = 2;
    in.p = 1;
    in.raw_time = trial % 2 == 0;
    in.omegas = {0.5};
    const std::size_t layers = static_cast<std::size_t>(trng.integer(1, 2));
    std::vector<OdeNetwork::Layer> shape(layers, {static_cast<std::size_t>(trng.integer(1, 4)),
                                                  static_cast<std::size_t>(trng.integer(1, 3))});
    OdeNetwork net(OperatorSet::parse("identity,sin,cos,square,tanh"), in, 2, shape);
    Rng rng(static_cast<std::uint64_t>(trial));
    net.init_random(rng, 0.8);
    for (std::size_t m = 0; m < 2; ++m) net.params()[net.w4_index(m, 1)] = 0.3;
    const auto ex = extract_expression(net, 0.1);
    const auto pr = pruned(net, 0.1);
    for (int i = 0; i < 50; ++i) {
      Eigen::VectorXd z(static_cast<Eigen::Index>(in.size()));
      for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = trng.uniform(-2, 2);
      const auto out = pr.evaluate<double>(std::span<const double>(pr.params()), z).out;
      for (std::size_t m = 0; m < 2; ++m)
        CHECK(std::abs(ex[m].eval(z) - out[static_cast<Eigen::Index>(m)]) < 1e-9);
    }
  }
}

TEST_CASE("precondition then extract round-trips the term set") {
  InputLayout in;
  in.n = 2;
  in.raw_time = false;
  in.omegas = {0.7};
  OdeNetwork net(OperatorSet::parse("identity,cube"), in, 2, {{5, 1}});
  Rng rng(4);
  net.init_random(rng);
  const PriorKnowledge prior{Situation::Partial,
                             {{0, "x2", 1.0, false},
                              {1, "x2", -0.3, false},
                              {1, "x1", -1.2, false},
                              {1, "x1^3", -0.5, false},
                              {1, "cos(0.7*t)", -0.9, false}}};
  const auto ex = extract_expression(precondition(net, prior), 1e-3);
  CHECK(ex[0].str(in.names()) == "x2");
  CHECK(ex[1].str(in.names()) == "-0.3*x2 - 1.2*x1 - 0.5*x1^3 - 0.9*cos(0.7*t)");
}

TEST_CASE("checkpoint round trip") {
  auto net = precondition(tank_network(), tank_prior({}));
  net.frozen()[3] = 1;
  const auto path = std::filesystem::temp_directory_path() / "odelearn_test_net.json";
  save_network(path, net);
  const auto back = load_network(path);
  CHECK(back.params() == net.params());
  CHECK(back.frozen() == net.frozen());
  CHECK(back.ops().names() == net.ops().names());
  CHECK(back.delta() == net.delta());
  CHECK(to_json(back).dump() == to_json(net).dump());
  auto j = to_json(net);
  j["format"] = "odenet-v0";
  CHECK_THROWS_AS(network_from_json(j), ConfigError);
}
