#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "odelearn/dynamics.hpp"
#include "support/oracles.hpp"

using namespace odelearn;
using namespace odelearn::dynamics;
using odelearn::testing::TestRng;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("odelearn_test_" + name);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("one Euler step of x' = -x") {
  LinearModel m(Eigen::MatrixXd::Constant(1, 1, -1.0), {}, Eigen::MatrixXd::Identity(1, 1));
  auto tr = integrate(m, Eigen::VectorXd::Constant(1, 1.0), InputSignal::zero(0), 0.1, 0.1, Method::Euler);
  REQUIRE(tr.size() == 2);
  CHECK(tr.states(1, 0) == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("RK4 harmonic oscillator follows cos t") {
  Duffing m(Duffing::Params{{0.0, -1.0, 0.0, 0.0}, 1.0});
  auto tr = integrate(m, Eigen::Vector2d(1.0, 0.0), InputSignal::zero(0), 10.0, 0.02, Method::Rk4);
  double err = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k)
    err = std::max(err, std::abs(tr.states(static_cast<Eigen::Index>(k), 0) - std::cos(tr.times[k])));
  CHECK(err < 1e-6);
}

TEST_CASE("RK4 shows fourth-order convergence") {
  LinearModel m(Eigen::MatrixXd::Constant(1, 1, -1.0), {}, Eigen::MatrixXd::Identity(1, 1));
  auto final_err = [&](double dt) {
    auto tr = integrate(m, Eigen::VectorXd::Constant(1, 1.0), InputSignal::zero(0), 2.0, dt, Method::Rk4);
    return std::abs(tr.states(tr.states.rows() - 1, 0) - std::exp(-2.0));
  };
  const double ratio = final_err(0.2) / final_err(0.1);
  CHECK(ratio >= 12.0);
  CHECK(ratio <= 20.0);
}

TEST_CASE("Duffing vector field example") {
  Duffing m(Duffing::Params{{1.0, 1.0, 1.0, 1.0}, 1.0});
  auto dx = m.f0(Eigen::Vector2d(1.0, 1.0), Eigen::VectorXd(0), 0.0);
  CHECK(dx[0] == 1.0);
  CHECK(dx[1] == 2.0);
  auto y = m.g0(Eigen::Vector2d(0.3, 1.0), Eigen::VectorXd(0), 0.0);
  CHECK(y[0] == 0.3);
}

TEST_CASE("cascaded tank equilibrium and dry tanks") {
  CascadedTank::Params p;
  CascadedTank m(p);
  const double u = 2.0;
  auto tr = integrate(m, Eigen::Vector2d(0.0, 0.0), InputSignal::constant(Eigen::VectorXd::Constant(1, u)), 400.0,
                      0.05, Method::Rk4);
  const double x1_star = std::pow(p.k[3] * u / p.k[0], 2);
  const double x2_star = std::pow(p.k[1] / p.k[2] * std::sqrt(x1_star), 2);
  CHECK(tr.states(tr.states.rows() - 1, 0) == doctest::Approx(x1_star).epsilon(1e-4));
  CHECK(tr.states(tr.states.rows() - 1, 1) == doctest::Approx(x2_star).epsilon(1e-4));

  auto dx = m.f0(Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1), 0.0);
  CHECK(dx.cwiseAbs().maxCoeff() == 0.0);
  auto dry = integrate(m, Eigen::Vector2d::Zero(), InputSignal::zero(1), 50.0, 0.1, Method::Euler);
  CHECK(dry.states.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cascaded tank levels stay in range") {
  CascadedTank::Params p;
  p.max_level = 3.0;
  CascadedTank m(p, 0.0, 0.05);
  auto tr = integrate(m, Eigen::Vector2d(0.01, 0.01), InputSignal::constant(Eigen::VectorXd::Constant(1, 20.0)),
                      200.0, 0.1, Method::Euler, 7);
  CHECK(tr.states.minCoeff() >= 0.0);
  CHECK(tr.states.maxCoeff() <= 3.0);
}

TEST_CASE("cart-pole equilibria") {
  CartPole m({});
  CHECK(m.f0(Eigen::Vector4d::Zero(), Eigen::VectorXd::Zero(1), 0.0).cwiseAbs().maxCoeff() == 0.0);
  const auto hang = m.f0(Eigen::Vector4d(0, 0, -std::numbers::pi, 0), Eigen::VectorXd::Zero(1), 0.0);
  CHECK(hang.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("cart-pole conserves energy without input") {
  CartPole m({});
  const Eigen::Vector4d x0(0.0, 0.3, 2.0, -0.5);
  auto tr = integrate(m, x0, InputSignal::zero(1), 10.0, 1e-3, Method::Rk4);
  const double e0 = m.energy(x0);
  double drift = 0.0;
  for (Eigen::Index k = 0; k < tr.states.rows(); ++k)
    drift = std::max(drift, std::abs(m.energy(tr.states.row(k).transpose()) - e0));
  CHECK(drift / std::abs(e0) < 1e-4);
}

TEST_CASE("cart-pole force is clamped") {
  CartPole m({});
  const auto a = m.f0(Eigen::Vector4d::Zero(), Eigen::VectorXd::Constant(1, 25.0), 0.0);
  const auto b = m.f0(Eigen::Vector4d::Zero(), Eigen::VectorXd::Constant(1, 100.0), 0.0);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampled Duffing scenarios stay finite over 48 s") {
  Rng root(2024);
  for (int i = 0; i < 100; ++i) {
    Rng r = root.split(static_cast<std::uint64_t>(i));
    const auto sc = sample_duffing_scenario(r);
    for (double b : sc.params.b) CHECK(std::abs(b) <= 1.0);
    CHECK(sc.params.omega0 >= 0.0);
    CHECK(sc.params.omega0 < 1.0);
    Duffing m(sc.params, 0.01);
    Trajectory tr;
    CHECK_NOTHROW(tr = integrate(m, sc.x0, InputSignal::zero(0), 48.0, 0.02, Method::Euler, 1));
    CHECK(tr.states.allFinite());
    CHECK(tr.outputs.allFinite());
  }
}

TEST_CASE("blow-up is reported with its time") {
  Duffing m(Duffing::Params{{0.0, 0.0, 1.0, 0.0}, 1.0});
  try {
    integrate(m, Eigen::Vector2d(2.0, 0.0), InputSignal::zero(0), 50.0, 0.01, Method::Euler);
    FAIL("expected blow-up");
  } catch (const BlowUpError& e) {
    CHECK(e.time() > 0.0);
    CHECK(e.time() < 50.0);
  }
}

TEST_CASE("synthesize is deterministic and byte-identical on disk") {
  Duffing m(Duffing::Params{{-0.2, -1.0, -0.3, 0.5}, 0.7}, 0.01);
  const auto a = synthesize(m, Eigen::Vector2d(0.5, 0.1), InputSignal::zero(0), 48.0, 0.02, 42);
  const auto b = synthesize(m, Eigen::Vector2d(0.5, 0.1), InputSignal::zero(0), 48.0, 0.02, 42);
  const auto c = synthesize(m, Eigen::Vector2d(0.5, 0.1), InputSignal::zero(0), 48.0, 0.02, 43);
  CHECK(a.measurements == b.measurements);
  CHECK(a.measurements != c.measurements);
  CHECK(a.size() == 2401);

  const auto dir = temp_dir("synth");
  write_dataset(dir / "a.csv", a);
  write_dataset(dir / "b.csv", b);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(slurp(dir / "a.csv.meta.json") == slurp(dir / "b.csv.meta.json"));

  const auto back = read_dataset(dir / "a.csv");
  CHECK(back.times == a.times);
  CHECK(back.measurements == a.measurements);
  CHECK(*back.states == *a.states);
  CHECK(back.meta.system == "duffing");
  CHECK(back.meta.seed == 42);
  CHECK(*back.x0 == *a.x0);

  // noise is independent of the stored ground truth
  const auto clean = back.clean_outputs();
  REQUIRE(clean);
  const double resid = rmse(*clean, back.measurements);
  CHECK(resid > 0.007);
  CHECK(resid < 0.013);
}

TEST_CASE("re-integrating with the stored seed reproduces the measurements") {
  CascadedTank m({}, 0.05, 0.01);
  Rng r(5);
  const auto input = InputSpec{"multisine", 3.0, 1.0, 1.0, 0.1, {0.01, 0.03}}.build(1, 400.0, r);
  const auto d = synthesize(m, Eigen::Vector2d(1.0, 1.0), input, 400.0, 4.0, 11);
  const auto tr = integrate(*make_system(d.meta.system, d.meta.system_params), *d.x0, input, 400.0, d.meta.dt,
                            Method::Euler, d.meta.seed);
  CHECK(tr.outputs == d.measurements);
}

TEST_CASE("zero noise gives clean measurements") {
  Duffing m(Duffing::Params{{-0.5, -1.0, -0.2, 0.3}, 0.5}, 0.0);
  const auto d = synthesize(m, Eigen::Vector2d(0.2, 0.4), InputSignal::zero(0), 10.0, 0.02, 3);
  CHECK(*d.clean_outputs() == d.measurements);
}

TEST_CASE("random-hold input respects its bound") {
  const auto u = InputSignal::random_hold(1, 25.0, 0.2, 30.0, Rng(9));
  double lo = 0.0, hi = 0.0;
  for (int k = 0; k <= 3000; ++k) {
    const double v = u.at(k * 0.01)[0];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo > -25.0);
  CHECK(hi < 25.0);
  CHECK(lo < -15.0);
  CHECK(hi > 15.0);
  // held constant within each period
  CHECK(u.at(0.21)[0] == u.at(0.39)[0]);
}

TEST_CASE("rmse examples") {
  Eigen::MatrixXd a(3, 2);
  a << 1, 2, 3, 4, 5, 6;
  CHECK(rmse(a, a) == 0.0);
  Eigen::MatrixXd one = Eigen::MatrixXd::Ones(4, 1);
  CHECK(rmse(one, Eigen::MatrixXd::Zero(4, 1)) == doctest::Approx(1.0));
  Eigen::MatrixXd p(2, 2);
  p << 0, 0, 3, 4;
  CHECK(rmse(p, Eigen::MatrixXd::Zero(2, 2)) == doctest::Approx(std::sqrt(12.5)));
  CHECK(rmse(p, Eigen::MatrixXd::Zero(2, 2)) == doctest::Approx(3.5355).epsilon(1e-4));
  CHECK_THROWS(rmse(p, Eigen::MatrixXd::Zero(3, 2)));
}

TEST_CASE("window selection") {
  Duffing m({}, 0.0);
  const auto d = synthesize(m, Eigen::Vector2d(1.0, 0.0), InputSignal::zero(0), 48.0, 0.02, 1);
  auto [b0, e0] = select_window(d, "first40s");
  CHECK(b0 == 0);
  CHECK(e0 == 2000);
  auto [b1, e1] = select_window(d, "last8s");
  CHECK(b1 == 2000);
  CHECK(e1 == 2401);
  auto [b2, e2] = select_window(d, "range:1:2");
  CHECK(b2 == 50);
  CHECK(e2 == 100);
  CHECK(select_window(d, "all").second == 2401);
  CHECK_THROWS_AS(select_window(d, "middle"), ConfigError);
  const auto tail = d.slice(b1, e1);
  CHECK(tail.x0->isApprox(d.states->row(2000).transpose()));
}

TEST_CASE("make_system rejects unknown ids and keys") {
  CHECK_THROWS_AS(make_system("pendulum", {}), ConfigError);
  CHECK_THROWS_AS(make_system("duffing", {{"beta", 1.0}}), ConfigError);
  auto m = make_system("cartpole", {{"pole_mass", 0.2}});
  CHECK(dynamic_cast<CartPole&>(*m).params().pole_mass == 0.2);
  auto t = make_system("cascaded_tank", system_params(CascadedTank({}, 0.1, 0.0)));
  CHECK(t->noise().R(0, 0) == doctest::Approx(0.01));
}

TEST_CASE("reading a malformed CSV fails") {
  const auto dir = temp_dir("bad");
  {
    std::ofstream out(dir / "bad.csv");
    out << "t,y_1\n0,1\n1,abc\n";
  }
  CHECK_THROWS_AS(read_dataset(dir / "bad.csv"), ConfigError);
  {
    std::ofstream out(dir / "unsorted.csv");
    out << "t,y_1\n1,1\n0,2\n";
  }
  CHECK_THROWS_AS(read_dataset(dir / "unsorted.csv"), ConfigError);
}

TEST_CASE("benchmark CSV is split into estimation and validation sets") {
  const auto dir = temp_dir("bench");
  {
    std::ofstream out(dir / "tank.csv");
    out << "uEst,uVal,yEst,yVal,Ts\n";
    for (int k = 0; k < 8; ++k) out << k << ',' << -k << ',' << 2 * k << ',' << 3 * k << (k == 0 ? ",4" : ",") << "\n";
  }
  auto [est, val] = read_cascaded_tank_benchmark(dir / "tank.csv");
  CHECK(est.size() == 8);
  CHECK(val.times[7] == 28.0);
  CHECK(val.measurements(3, 0) == 9.0);
  CHECK(est.inputs(5, 0) == 5.0);
}

TEST_CASE("dominant frequency of a noisy sinusoid with an offset") {
  TestRng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const double w = rng.uniform(0.2, 1.2), phase = rng.uniform(-3.0, 3.0), offset = rng.uniform(-2.0, 2.0);
    Dataset d;
    const std::size_t N = 2000;
    d.inputs.resize(static_cast<Eigen::Index>(N), 0);
    d.measurements.resize(static_cast<Eigen::Index>(N), 1);
    for (std::size_t k = 0; k < N; ++k) {
      const double t = 0.02 * static_cast<double>(k);
      d.times.push_back(t);
      d.measurements(static_cast<Eigen::Index>(k), 0) = offset + 0.5 * std::cos(w * t + phase) + 0.05 * rng.normal();
    }
    // A single tone over 40 s: the periodogram peak sits within a small
    // fraction of the 2 pi / T bin width of the true frequency.
    CHECK(std::abs(dominant_frequency(d, 0, 0.05, 1.5) - w) < 0.01);
  }
}

TEST_CASE("dominant frequency argument checks") {
  Dataset d;
  d.times = {0.0, 1.0};
  d.inputs.resize(2, 0);
  d.measurements = Eigen::MatrixXd::Zero(2, 1);
  CHECK_THROWS_AS(dominant_frequency(d, 1, 0.1, 1.0), ConfigError);
  CHECK_THROWS_AS(dominant_frequency(d, 0, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(dominant_frequency(d, 0, 1.0, 0.5), ConfigError);
}
