#include <doctest.h>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "odelearn/dynamics.hpp"
#include "odelearn/ekbf.hpp"
#include "odelearn/learner.hpp"
#include "support/oracles.hpp"

using namespace odelearn;
using namespace odelearn::learner;
using odelearn::testing::TestRng;

namespace {

NetworkFunction output_fn(const std::string& ops, std::size_t n, std::size_t q, std::size_t neurons,
                          std::vector<eqlnet::KnownTerm> terms) {
  eqlnet::InputLayout in;
  in.n = n;
  in.raw_time = false;
  eqlnet::OdeNetwork net(eqlnet::OperatorSet::parse(ops), in, q, {{neurons, 1}});
  Rng r(7);
  net.init_random(r);
  return NetworkFunction(eqlnet::precondition(net, {eqlnet::Situation::Partial, std::move(terms)}));
}

struct McMoments {
  Eigen::VectorXd mu, var;
};

// Plain Monte-Carlo estimate of the output moments for x ~ N(xi, psi).
McMoments monte_carlo(const Function& f, const Eigen::VectorXd& xi, const Eigen::MatrixXd& psi, std::size_t samples,
                      unsigned long long seed) {
  TestRng rng(seed);
  const Eigen::MatrixXd L = psi.llt().matrixL();
  const Eigen::VectorXd u(0);
  Eigen::VectorXd s1, s2;
  for (std::size_t k = 0; k < samples; ++k) {
    Eigen::VectorXd e(xi.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = rng.normal();
    const Eigen::VectorXd y = f.eval(Eigen::VectorXd(xi + L * e), u, 0.0);
    if (k == 0) {
      s1 = Eigen::VectorXd::Zero(y.size());
      s2 = Eigen::VectorXd::Zero(y.size());
    }
    s1 += y;
    s2 += y.cwiseProduct(y);
  }
  const double N = static_cast<double>(samples);
  McMoments m;
  m.mu = s1 / N;
  m.var = (s2 / N - m.mu.cwiseProduct(m.mu)) * (N / (N - 1.0));
  return m;
}

dynamics::Dataset duffing_data(double t_end, std::uint64_t seed) {
  dynamics::Duffing sys(dynamics::Duffing::Params{{-0.3, -0.8, -0.4, 0.5}, 0.8}, 0.01);
  return dynamics::synthesize(sys, Eigen::Vector2d(0.4, 0.1), dynamics::InputSignal::zero(0), t_end, 0.02, seed);
}

ArchitectureConfig toy_arch() {
  ArchitectureConfig a;
  a.n = 2;
  a.state_ops = "identity,sin,cube";
  a.state_neurons = 2;
  a.raw_time = false;
  a.omegas = {0.8};
  a.output_ops = "identity,sin";
  a.output_neurons = 1;
  a.mean_fourier = 3;
  a.mean_hidden = {5};
  a.cov_fourier = 2;
  a.cov_hidden = {4};
  a.q_diag = Eigen::Vector2d(1e-2, 2e-2);
  a.r_diag = Eigen::VectorXd::Constant(1, 1e-2);
  return a;
}

double loss_at(const LearnerNetworks& nets, const std::vector<double>& theta, const dynamics::Dataset& data,
               const LossWeights& w) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  ad::Tape tape;
  return evaluate_batch(nets, theta, data, idx, w, false, tape).total;
}

// Checks the analytic gradient against central differences on `count`
// random trainable weights; returns the worst relative error.
double worst_gradient_error(const LearnerNetworks& nets, const dynamics::Dataset& data, const LossWeights& w,
                            std::size_t count, unsigned long long seed) {
  const auto theta = nets.flatten();
  const auto frozen = nets.frozen_mask();
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  ad::Tape tape;
  const auto res = evaluate_batch(nets, theta, data, idx, w, true, tape);
  REQUIRE(res.finite);
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < theta.size(); ++i)
    if (!frozen[i]) trainable.push_back(i);
  std::shuffle(trainable.begin(), trainable.end(), TestRng(seed).engine());
  trainable.resize(std::min(count, trainable.size()));
  double worst = 0.0;
  for (std::size_t i : trainable) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta[i]));
    auto tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    const double fd = (loss_at(nets, tp, data, w) - loss_at(nets, tm, data, w)) / (2.0 * h);
    const double g = res.gradient[i];
    const double scale = std::max({std::abs(fd), std::abs(g), 1e-4});
    worst = std::max(worst, std::abs(fd - g) / scale);
  }
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

TEST_CASE("moments of a scaled identity output") {
  const auto f = output_fn("identity", 1, 1, 1, {{0, "x1", 2.0, false}});
  const auto m = propagate_moments(Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 0.25), f,
                                   Eigen::VectorXd(0), 0.0);
  CHECK(m.mu[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(m.sigma2[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(closed_form_moments(f));
}

TEST_CASE("measurement noise adds to the output variance") {
  const auto f = output_fn("identity", 1, 1, 1, {{0, "x1", 1.0, false}});
  const auto m = propagate_moments(Eigen::VectorXd::Constant(1, 0.7), Eigen::MatrixXd::Zero(1, 1), f,
                                   Eigen::VectorXd(0), 0.0, Eigen::VectorXd::Constant(1, 0.01));
  CHECK(m.mu[0] == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(m.sigma2[0] == doctest::Approx(0.01).epsilon(1e-14));
}

TEST_CASE("affine outputs propagate exactly") {
  const auto f = output_fn("identity", 3, 2, 4,
                           {{0, "x1", 0.3, false}, {0, "x2", -1.2, false}, {0, "x3", 0.7, false}, {1, "x2", 2.0, false}});
  Eigen::Matrix<double, 2, 3> C;
  C << 0.3, -1.2, 0.7, 0.0, 2.0, 0.0;
  TestRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector3d xi;
    Eigen::Matrix3d M;
    for (int i = 0; i < 3; ++i) {
      xi[i] = rng.uniform(-2, 2);
      for (int j = 0; j < 3; ++j) M(i, j) = rng.uniform(-1, 1);
    }
    const Eigen::Matrix3d psi = M * M.transpose();
    const Eigen::Vector2d r(0.01, 0.02);
    const auto m = propagate_moments(xi, psi, f, Eigen::VectorXd(0), 0.0, r);
    const Eigen::Vector2d mu = C * xi;
    const Eigen::Vector2d var = (C * psi * C.transpose()).diagonal() + r;
    CHECK((m.mu - mu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((m.sigma2 - var).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("moments of sin(x) match Monte-Carlo") {
  const auto f = output_fn("sin", 1, 1, 1, {{0, "sin(x1)", 1.0, false}});
  for (double s : {0.1, 0.5, 2.0}) {
    const auto m = propagate_moments(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, s), f,
                                     Eigen::VectorXd(0), 0.0);
    CHECK(std::abs(m.mu[0]) < 1e-15);
    CHECK(m.sigma2[0] == doctest::Approx(0.5 * (1.0 - std::exp(-2.0 * s))).epsilon(1e-12));
    const auto mc = monte_carlo(f, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, s), 1000000, 11);
    CHECK(std::abs(mc.mu[0]) < 2e-3);
    CHECK(m.sigma2[0] == doctest::Approx(mc.var[0]).epsilon(3e-3));
  }
}

TEST_CASE("mixed trigonometric and polynomial outputs match Monte-Carlo") {
  const auto f = output_fn("identity,sin,cos,square", 2, 1, 4,
                           {{0, "x1", 0.5, false},
                            {0, "sin(x2)", 1.2, false},
                            {0, "x1^2", -0.3, false},
                            {0, "cos(x1 - 0.5*x2)", 0.8, false}});
  REQUIRE(closed_form_moments(f));
  const Eigen::Vector2d xi(0.3, -0.6);
  Eigen::Matrix2d psi;
  psi << 0.4, 0.15, 0.15, 0.3;
  const auto m = propagate_moments(xi, psi, f, Eigen::VectorXd(0), 0.0);
  const auto mc = monte_carlo(f, xi, psi, 1000000, 5);
  CHECK(m.mu[0] == doctest::Approx(mc.mu[0]).epsilon(3e-3));
  CHECK(m.sigma2[0] == doctest::Approx(mc.var[0]).epsilon(3e-3));
}

TEST_CASE("non-closed-form outputs fall back to sigma points") {
  const auto f = output_fn("identity,cube", 2, 1, 2, {{0, "x1^3", 1.0, false}, {0, "x2", 1.0, false}});
  CHECK_FALSE(closed_form_moments(f));
  // Sigma points integrate cubics exactly in the mean.
  const Eigen::Vector2d xi(0.5, 0.2);
  Eigen::Matrix2d psi;
  psi << 0.09, 0.0, 0.0, 0.04;
  const auto m = propagate_moments(xi, psi, f, Eigen::VectorXd(0), 0.0);
  CHECK(m.mu[0] == doctest::Approx(0.125 + 3 * 0.5 * 0.09 + 0.2).epsilon(1e-12));
}

TEST_CASE("moments reject indefinite covariances") {
  const auto f = output_fn("identity", 2, 1, 1, {{0, "x1", 1.0, false}});
  Eigen::Matrix2d psi;
  psi << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS(propagate_moments(Eigen::Vector2d::Zero(), psi, f, Eigen::VectorXd(0), 0.0), ConfigError);
  psi << 1.0, 0.5, 0.4, 1.0;
  CHECK_THROWS_AS(propagate_moments(Eigen::Vector2d::Zero(), psi, f, Eigen::VectorXd(0), 0.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

TEST_CASE("negative log-likelihood examples") {
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(1, 0.3);
  auto l1 = [&](double mu, double s2) {
    return loss_l1<double>(y, Eigen::VectorXd::Constant(1, mu), Eigen::VectorXd::Constant(1, s2));
  };
  CHECK(std::abs(l1(0.3, 1.0 / (2.0 * std::numbers::pi))) < 1e-15);
  CHECK(l1(0.3, 1.0) == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-14));
  CHECK(l1(-0.7, 1.0) == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi) + 0.5).epsilon(1e-14));
  CHECK(l1(-0.7, 1.0) == doctest::Approx(1.4189).epsilon(1e-4));
  CHECK_THROWS_AS(l1(0.3, 0.0), ConfigError);
}

TEST_CASE("mean residual vanishes only with the generating dynamics") {
  // Harmonic oscillator x1' = x2, x2' = -x1 and its exact solution.
  eqlnet::InputLayout in;
  in.n = 2;
  in.raw_time = false;
  eqlnet::OdeNetwork net(eqlnet::OperatorSet::parse("identity"), in, 2, {{2, 1}});
  Rng r(2);
  net.init_random(r);
  net = eqlnet::precondition(net, {eqlnet::Situation::Partial, {{0, "x2", 1.0, false}, {1, "x1", -1.0, false}}});
  const std::size_t coef = net.w3_index(1, 2);
  REQUIRE(net.params()[coef] == doctest::Approx(-1.0));
  const Eigen::VectorXd x0 = Eigen::Vector2d(1.0, 0.0);

  auto l2_sum = [&](double eps) {
    auto pert = net;
    pert.params()[coef] += eps;
    double total = 0.0;
    for (int k = 0; k <= 20; ++k) {
      const double t = 0.2 * k;
      const Eigen::Vector2d xi(std::cos(t), -std::sin(t)), xi_dot(-std::sin(t), -std::cos(t));
      const Eigen::VectorXd Xi = pert.forward(xi, Eigen::VectorXd(0), Eigen::VectorXd(0), t);  // K.innovation = 0
      total += loss_l2<double>(x0, x0, xi_dot, Xi);
    }
    return total;
  };
  CHECK(l2_sum(0.0) < 1e-6);
  double prev = l2_sum(0.1);
  CHECK(prev > 0.1);
  for (double eps : {0.05, 0.01, 0.001}) {
    const double cur = l2_sum(eps);
    CHECK(cur < prev);
    prev = cur;
  }
  // Only the initial-condition mismatch remains with exact dynamics.
  const Eigen::VectorXd xi0 = Eigen::Vector2d(1.1, 0.0);
  CHECK(std::abs(loss_l2<double>(xi0, x0, Eigen::VectorXd(x0), Eigen::VectorXd(x0)) - 0.1) < 1e-7);
  CHECK(loss_l2<double>(x0, x0, Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2)) < 1e-7);
}

TEST_CASE("covariance residual at the Riccati fixed point") {
  // P' = -2P - P^2 + 2 has the stationary solution sqrt(3) - 1.
  const double p = std::sqrt(3.0) - 1.0;
  const Eigen::MatrixXd A = Eigen::MatrixXd::Constant(1, 1, -1.0), C = Eigen::MatrixXd::Constant(1, 1, 1.0);
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Constant(1, 1, 2.0), R = Eigen::MatrixXd::Constant(1, 1, 1.0);
  const Eigen::MatrixXd psi = Eigen::MatrixXd::Constant(1, 1, p);
  const Eigen::MatrixXd K = ekbf::kalman_gain<double>(psi, C, R);
  const Eigen::MatrixXd Psi = ekbf::cov_rhs<double>(A, psi, K, C, Q);
  CHECK(loss_l3<double>(psi, psi, Eigen::MatrixXd::Zero(1, 1), Psi) < 1e-3);
  CHECK(loss_l3<double>(psi, psi, Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Zero(1, 1)) < 1e-7);
}

TEST_CASE("covariance residual is linear in the process noise") {
  TestRng rng(4);
  Eigen::Matrix3d A, M, Q0;
  Eigen::Matrix<double, 2, 3> C;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      A(i, j) = rng.uniform(-1, 1);
      M(i, j) = rng.uniform(-1, 1);
      Q0(i, j) = rng.uniform(-1, 1);
    }
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) C(i, j) = rng.uniform(-1, 1);
  const Eigen::MatrixXd psi = M * M.transpose(), Q = Q0 * Q0.transpose();
  const Eigen::MatrixXd Cd = C, R = Eigen::Matrix2d::Identity() * 0.3;
  const Eigen::MatrixXd K = ekbf::kalman_gain<double>(psi, Cd, R);
  const Eigen::MatrixXd psi_dot = ekbf::cov_rhs<double>(A, psi, K, Cd, Eigen::MatrixXd::Zero(3, 3));
  for (double s : {0.5, 1.0, 3.0}) {
    const Eigen::MatrixXd Psi = ekbf::cov_rhs<double>(A, psi, K, Cd, Eigen::MatrixXd(s * Q));
    const double res = loss_l3<double>(psi, psi, psi_dot, Psi);
    CHECK(std::abs(res - s * Q.norm()) < 1e-7);
  }
}

TEST_CASE("sparsity regularizer examples") {
  LossWeights w;
  const std::vector<double> one{1.0}, none;
  const std::vector<double> dens{1.0};
  CHECK(loss_l4<double>(one, dens, w) == doctest::Approx(1.00331).epsilon(1e-5));
  w.alpha41 = 2.0;
  CHECK(loss_l4<double>(one, none, w) == doctest::Approx(2.0 * loss_l4<double>(one, none, LossWeights{})).epsilon(1e-15));
  LossWeights big;
  big.a.a3 = 60.0;
  const std::vector<double> zeros(10, 0.0);
  CHECK(loss_l4<double>(zeros, dens, big) < 1e-8);
  // A denominator below delta is penalized linearly.
  const std::vector<double> small{0.0};
  CHECK(loss_l4<double>(none, small, LossWeights{}) == doctest::Approx(1e-3).epsilon(1e-6));
}

TEST_CASE("total loss averages weighted components") {
  LossWeights w;
  w.alpha4 = 1.0;
  const std::vector<LossComponents> c{{1, 1, 1, 1}, {3, 3, 3, 3}};
  CHECK(total_loss(c, w) == doctest::Approx(8.0).epsilon(1e-15));
  const std::vector<LossComponents> z{{0, 0, 0, 0}};
  CHECK(total_loss(z, w) == 0.0);
  LossWeights nll;
  nll.alpha2 = nll.alpha3 = nll.alpha4 = 0.0;
  CHECK(total_loss(c, nll) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK_THROWS_AS(total_loss(std::vector<LossComponents>{}, w), ConfigError);
}

TEST_CASE("loss weights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.alpha2 = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.delta = 0.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// PINN loss
// ---------------------------------------------------------------------------

namespace {
dynamics::Dataset grid(double t_end, std::size_t N) {
  dynamics::Dataset d;
  for (std::size_t i = 0; i < N; ++i) d.times.push_back(t_end * static_cast<double>(i) / static_cast<double>(N - 1));
  d.inputs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N), 0);
  d.measurements = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N), 1);
  return d;
}
}  // namespace

TEST_CASE("PINN loss examples") {
  dynamics::LinearModel zero(Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Zero(1, 0), Eigen::MatrixXd::Ones(1, 1));
  // Linear net of tau: x(t) = b + w (2 t / T - 1).
  TimeNet net(1, 0, {}, 0.0, 4.0);
  const auto x0 = Eigen::VectorXd::Constant(1, 0.5);
  net.params() = {0.0, 0.5};
  CHECK(loss_pinn(net, net.params(), zero, grid(4.0, 1), x0) == 0.0);
  CHECK(loss_pinn(net, net.params(), zero, grid(4.0, 9), x0) == 0.0);
  // dx/dt = 2 w / T = 0.1 and x(0) - x0 = -w.
  net.params() = {0.2, 0.5};
  CHECK(loss_pinn(net, net.params(), zero, grid(4.0, 1), x0) == doctest::Approx(0.01 + 0.04).epsilon(1e-12));
}

TEST_CASE("PINN training reduces the residual for x' = -x") {
  ArchitectureConfig a;
  a.n = 1;
  a.state_ops = "identity";
  a.state_neurons = 1;
  a.raw_time = false;
  a.state_prior = {eqlnet::Situation::Partial, {{0, "x1", -1.0, true}}};
  a.output_prior = {eqlnet::Situation::Partial, {{0, "x1", 1.0, true}}};
  a.output_trainable = false;
  a.mean_fourier = 4;
  a.mean_hidden = {12};
  auto data = grid(4.0, 41);
  data.x0 = Eigen::VectorXd::Constant(1, 1.0);
  auto nets = build_networks(a, data, 3);
  TrainConfig c;
  c.mode = "pinn";
  c.learning_rate = 1e-2;
  c.epochs_fit = 150;
  c.epochs_sparse = 0;
  c.batch_size = 41;
  const auto rep = train(nets, data, c);
  CHECK_FALSE(rep.diverged);
  CHECK(rep.final_total < 0.05 * rep.initial_total);
}

// ---------------------------------------------------------------------------
// Assembled loss
// ---------------------------------------------------------------------------

TEST_CASE("analytic gradient of the total loss matches finite differences") {
  const auto data = duffing_data(0.2, 21);
  LossWeights w;
  w.alpha4 = 0.1;
  SUBCASE("fixed initial state") {
    const auto nets = build_networks(toy_arch(), data, 5);
    CHECK_FALSE(nets.x0_trainable);
    CHECK(worst_gradient_error(nets, data, w, 50, 1) < 1e-3);
  }
  SUBCASE("trainable initial state, wider output operators") {
    auto d = data;
    d.x0.reset();
    auto arch = toy_arch();
    arch.output_ops = "identity,sin,cos,square";
    arch.output_neurons = 2;
    const auto nets = build_networks(arch, d, 6);
    CHECK(nets.x0_trainable);
    CHECK(worst_gradient_error(nets, d, w, 50, 2) < 1e-3);
  }
  SUBCASE("plain network state function") {
    auto arch = toy_arch();
    arch.state_kind = "mlp";
    arch.state_hidden = {6};
    const auto nets = build_networks(arch, data, 7);
    CHECK(worst_gradient_error(nets, data, w, 50, 3) < 1e-3);
  }
}

TEST_CASE("total loss does not depend on sample order") {
  const auto data = duffing_data(0.4, 8);
  const auto nets = build_networks(toy_arch(), data, 9);
  const auto theta = nets.flatten();
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  ad::Tape tape;
  LossWeights w;
  const double a = evaluate_batch(nets, theta, data, idx, w, false, tape).total;
  TestRng rng(8);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    CHECK(evaluate_batch(nets, theta, data, idx, w, false, tape).total == doctest::Approx(a).epsilon(1e-12));
  }
  // The per-sample breakdown reproduces the assembled value.
  auto comps = sample_components(nets, data, w);
  const auto all = evaluate_all(nets, data, w);
  double l1 = 0.0;
  for (const auto& c : comps) l1 += c.l1;
  CHECK(all.components.l1 == doctest::Approx(l1 / static_cast<double>(comps.size())).epsilon(1e-12));
}

TEST_CASE("psi is positive semidefinite for arbitrary weights") {
  const auto data = duffing_data(0.4, 8);
  auto nets = build_networks(toy_arch(), data, 10);
  TestRng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    for (double& p : nets.cov.params()) p = rng.uniform(-3, 3);
    const double t = rng.uniform(0, 0.4);
    const Eigen::MatrixXd psi = nets.cov_at(t);
    CHECK((psi - psi.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(psi);
    CHECK(es.eigenvalues().minCoeff() > -1e-12 * std::max(1.0, psi.norm()));
  }
}

TEST_CASE("initial covariance and mean match the configuration") {
  const auto data = duffing_data(0.4, 8);
  auto arch = toy_arch();
  arch.p0 = 0.04;
  const auto nets = build_networks(arch, data, 11);
  CHECK((nets.P0 - 0.04 * Eigen::Matrix2d::Identity()).norm() == 0.0);
  // Initialization starts near x0 and P0.
  CHECK((nets.mean_at(0.0) - *data.x0).norm() < 0.5);
  CHECK((nets.cov_at(0.0) - nets.P0).norm() < 0.05);
}

TEST_CASE("zero-epoch training leaves the networks unchanged") {
  const auto data = duffing_data(0.4, 8);
  auto nets = build_networks(toy_arch(), data, 12);
  const auto before = nets.flatten();
  TrainConfig c;
  c.epochs_fit = c.epochs_sparse = 0;
  const auto rep = train(nets, data, c);
  CHECK(nets.flatten() == before);
  CHECK(rep.epochs.empty());
  CHECK(rep.initial_total == rep.final_total);
  CHECK(std::isfinite(rep.initial.l1));
}

TEST_CASE("training is deterministic and lowers the loss") {
  const auto data = duffing_data(1.0, 13);
  auto run = [&] {
    auto nets = build_networks(toy_arch(), data, 14);
    TrainConfig c;
    c.learning_rate = 5e-3;
    c.epochs_fit = 20;
    c.epochs_sparse = 5;
    c.batch_size = 16;
    c.seed = 3;
    const auto rep = train(nets, data, c);
    return std::make_pair(nets.flatten(), rep);
  };
  const auto [a, ra] = run();
  const auto [b, rb] = run();
  CHECK(a == b);
  CHECK_FALSE(ra.diverged);
  CHECK(ra.epochs.size() == 25);
  CHECK(ra.epochs.front().phase == 1);
  CHECK(ra.epochs.back().phase == 2);
  CHECK(ra.final_total < ra.initial_total);
  for (const auto& e : ra.epochs) {
    CHECK(std::isfinite(e.total));
    CHECK(std::isfinite(e.components.l4));
  }
}

TEST_CASE("frozen parameters stay fixed during training") {
  const auto data = duffing_data(0.6, 15);
  auto arch = toy_arch();
  arch.state_kind = "parametric";
  arch.parametric_system = "duffing";
  arch.parametric_init = {-0.2, -0.7, -0.3, 0.4, 0.8};
  arch.parametric_frozen = {0, 0, 0, 0, 1};
  arch.output_ops = "identity";
  arch.output_prior = {eqlnet::Situation::Partial, {{0, "x1", 1.0, true}}};
  arch.output_trainable = false;
  auto nets = build_networks(arch, data, 16);
  const auto out_before = nets.model.output().params();
  TrainConfig c;
  c.epochs_fit = 3;
  c.epochs_sparse = 0;
  c.batch_size = 8;
  train(nets, data, c);
  CHECK(nets.model.state().params()[4] == 0.8);
  CHECK(nets.model.state().params()[0] != -0.2);
  CHECK(nets.model.output().params() == out_before);
  CHECK(nets.x0 == *data.x0);
}

TEST_CASE("learner checkpoint round-trip") {
  const auto data = duffing_data(0.4, 17);
  auto arch = toy_arch();
  auto nets = build_networks(arch, data, 18);
  const auto path = std::filesystem::temp_directory_path() / "odelearn_learner_ckpt.json";
  save_checkpoint(path, nets);
  const auto back = load_checkpoint(path);
  CHECK(back.flatten() == nets.flatten());
  CHECK(back.frozen_mask() == nets.frozen_mask());
  LossWeights w;
  CHECK(evaluate_all(back, data, w).total == evaluate_all(nets, data, w).total);
  const auto ta = simulate_identified(nets, data, dynamics::Method::Rk4);
  const auto tb = simulate_identified(back, data, dynamics::Method::Rk4);
  CHECK(ta.outputs == tb.outputs);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(learner_from_json(nlohmann::json{{"format", "other"}}), ConfigError);
}

TEST_CASE("identified equations print for ODE-network state functions") {
  const auto data = duffing_data(0.4, 19);
  auto arch = toy_arch();
  arch.state_ops = "identity,cube";
  arch.state_neurons = 3;
  arch.state_prior = {eqlnet::Situation::Partial,
                      {{0, "x2", 1.0, false}, {1, "x1", -0.8, false}, {1, "x1^3", -0.4, false}}};
  const auto nets = build_networks(arch, data, 20);
  const auto eq = identified_equations(nets, 1e-9);
  REQUIRE(eq.size() == 2);
  CHECK(eq[0] == "dx1/dt = x2");
  CHECK(eq[1] == "dx2/dt = -0.8*x1 - 0.4*x1^3");
}

TEST_CASE("omega_search starts omega0 at the periodogram peak") {
  const auto data = duffing_data(40.0, 19);
  auto arch = toy_arch();
  arch.state_kind = "parametric";
  arch.parametric_system = "duffing";
  arch.parametric_init = {-0.5, -0.5, -0.5, 0.5, 0.3};
  arch.omega_search = {0.1, 1.5};
  const auto nets = build_networks(arch, data, 20);
  const double w0 = nets.model.state().params()[4];
  CHECK(w0 == dynamics::dominant_frequency(data, 0, 0.1, 1.5));
  CHECK(std::abs(w0 - 0.8) < 0.05);
  CHECK(nets.model.state().params()[0] == -0.5);

  arch.state_kind = "odenet";
  CHECK_THROWS_AS(build_networks(arch, data, 20), ConfigError);
  arch.state_kind = "parametric";
  arch.omega_search = {0.1};
  CHECK_THROWS_AS(build_networks(arch, data, 20), ConfigError);
}

namespace {

// Two recordings from the same x0 back to back, the second starting one
// sample interval after the first ends.
dynamics::Dataset two_segments() {
  const auto a = duffing_data(0.4, 21), b = duffing_data(0.4, 22);
  dynamics::Dataset d = a;
  const double offset = a.times.back() + 0.02;
  d.meta.segment_starts = {offset};
  for (double t : b.times) d.times.push_back(offset + t);
  const auto na = a.inputs.rows(), nb = b.inputs.rows();
  d.inputs = Eigen::MatrixXd::Zero(na + nb, 0);
  d.measurements.conservativeResize(na + nb, Eigen::NoChange);
  d.measurements.bottomRows(nb) = b.measurements;
  d.states->conservativeResize(na + nb, Eigen::NoChange);
  d.states->bottomRows(nb) = *b.states;
  return d;
}

}  // namespace

TEST_CASE("segmented data gets one time network per recording") {
  const auto data = two_segments();
  const auto nets = build_networks(toy_arch(), data, 23);
  REQUIRE(nets.mean.segments() == 2);
  REQUIRE(nets.cov.segments() == 2);
  const double s1 = data.meta.segment_starts[0];
  CHECK(nets.mean.segment_of(0.0) == 0);
  CHECK(nets.mean.segment_of(s1 - 1e-9) == 0);
  CHECK(nets.mean.segment_of(s1) == 1);
  // Both segments start near x0 and P0.
  CHECK((nets.mean_at(0.0) - *data.x0).norm() < 0.5);
  CHECK((nets.mean_at(s1) - *data.x0).norm() < 0.5);
  CHECK((nets.cov_at(s1) - nets.P0).norm() < 0.05);
}

TEST_CASE("initial-condition terms cover every segment") {
  const auto data = two_segments();
  const auto nets = build_networks(toy_arch(), data, 24);
  // Only samples of the first recording in the batch.
  std::vector<std::size_t> first;
  for (std::size_t k = 0; k < data.size(); ++k)
    if (data.times[k] < data.meta.segment_starts[0]) first.push_back(k);
  LossWeights w;
  ad::Tape tape;
  auto theta = nets.flatten();
  const auto base = evaluate_batch(nets, theta, data, first, w, false, tape);
  // Moving the second segment's mean output changes xi at its start only.
  theta[nets.blocks().mean + nets.mean.output_bias_offset(1)] += 0.3;
  const auto moved = evaluate_batch(nets, theta, data, first, w, false, tape);
  CHECK(moved.components.l2 > base.components.l2);
  CHECK(moved.components.l1 == base.components.l1);
}

TEST_CASE("segmented checkpoint round-trip") {
  const auto data = two_segments();
  const auto nets = build_networks(toy_arch(), data, 25);
  const auto path = std::filesystem::temp_directory_path() / "odelearn_learner_segments.json";
  save_checkpoint(path, nets);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back.mean.segments() == 2);
  CHECK(back.flatten() == nets.flatten());
  for (double t : {0.1, data.meta.segment_starts[0] + 0.1}) {
    CHECK(back.mean_at(t) == nets.mean_at(t));
    CHECK(back.cov_at(t) == nets.cov_at(t));
  }
}
