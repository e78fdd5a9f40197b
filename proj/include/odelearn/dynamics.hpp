// Benchmark systems, fixed-step integration, dataset synthesis and metrics.
#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "odelearn/math.hpp"
#include "odelearn/model.hpp"
#include "odelearn/random.hpp"

namespace odelearn::dynamics {

// ---------------------------------------------------------------------------
// Systems
// ---------------------------------------------------------------------------

// x1' = x2, x2' = b1 x2 + b2 x1 + b3 x1^3 - b4 cos(omega0 t), y = x1 + v.
// Process noise enters additively on both states.
class Duffing : public ModelBase<Duffing> {
 public:
  struct Params {
    std::array<double, 4> b{0.0, -1.0, 0.0, 0.0};
    double omega0 = 1.0;
  };

  explicit Duffing(Params params, double sigma_v = 0.0);

  Dims dims() const override { return {2, 0, 1}; }
  std::string id() const override { return "duffing"; }
  const Params& params() const { return params_; }

  template <class T>
  VecX<T> f_impl(const VecX<T>& x, const VecX<T>& /*u*/, const VecX<T>& w, const T& t) const {
    using std::cos;
    const auto& b = params_.b;
    VecX<T> dx(2);
    dx[0] = x[1] + w[0];
    dx[1] = b[0] * x[1] + b[1] * x[0] + b[2] * x[0] * x[0] * x[0] - b[3] * cos(params_.omega0 * t) + w[1];
    return dx;
  }
  template <class T>
  VecX<T> g_impl(const VecX<T>& x, const VecX<T>& /*u*/, const VecX<T>& v, const T& /*t*/) const {
    VecX<T> y(1);
    y[0] = x[0] + v[0];
    return y;
  }

 private:
  Params params_;
};

// Scenario generator following the Duffing benchmark protocol: magnitudes,
// forcing frequency and initial state drawn from U(0, 1). Damping, linear and
// cubic stiffness coefficients are given restoring signs so the oscillator
// stays bounded over the 48 s horizon.
struct DuffingScenario {
  Duffing::Params params;
  Eigen::Vector2d x0;
};
DuffingScenario sample_duffing_scenario(Rng& rng);

// Two cascaded tanks (Bernoulli outflow):
//   x1' = -k1 sqrt(x1) + k4 u + w1
//   x2' =  k2 sqrt(x1) - k3 sqrt(x2) + w2
//   y   = sensor_gain * x2 + sensor_offset + v
// sqrt is smooth_sqrt; levels are clamped to [0, max_level] after each step.
class CascadedTank : public ModelBase<CascadedTank> {
 public:
  struct Params {
    std::array<double, 4> k{0.5, 0.4, 0.3, 0.2};
    double pump_gain = 1.0;
    double sensor_gain = 1.0;
    double sensor_offset = 0.0;
    double max_level = 0.0;  // 0 disables overflow saturation
  };

  explicit CascadedTank(Params params, double sigma_v = 0.0, double sigma_w = 0.0);

  Dims dims() const override { return {2, 1, 1}; }
  std::string id() const override { return "cascaded_tank"; }
  const Params& params() const { return params_; }
  void project_state(Eigen::VectorXd& x) const override;

  template <class T>
  VecX<T> f_impl(const VecX<T>& x, const VecX<T>& u, const VecX<T>& w, const T& /*t*/) const {
    const auto& k = params_.k;
    const T s1 = smooth_sqrt(x[0]);
    VecX<T> dx(2);
    dx[0] = -k[0] * s1 + k[3] * params_.pump_gain * u[0] + w[0];
    dx[1] = k[1] * s1 - k[2] * smooth_sqrt(x[1]) + w[1];
    return dx;
  }
  template <class T>
  VecX<T> g_impl(const VecX<T>& x, const VecX<T>& /*u*/, const VecX<T>& v, const T& /*t*/) const {
    VecX<T> y(1);
    y[0] = params_.sensor_gain * x[1] + params_.sensor_offset + v[0];
    return y;
  }

 private:
  Params params_;
};

// Frictionless cart-pole, state (x, x', theta, theta'), theta = 0 upright.
// The pole is a uniform rod whose centre of mass sits `length` from the pivot.
// The horizontal force is clamped to [-force_limit, force_limit]. Every state
// is measured: y = x + v.
class CartPole : public ModelBase<CartPole> {
 public:
  struct Params {
    double cart_mass = 1.0;
    double pole_mass = 0.1;
    double length = 0.5;
    double gravity = 9.81;
    double force_limit = 25.0;
  };

  explicit CartPole(Params params, double sigma_v = 0.0, double sigma_w = 0.0);

  Dims dims() const override { return {4, 1, 4}; }
  std::string id() const override { return "cartpole"; }
  const Params& params() const { return params_; }
  double energy(const Eigen::VectorXd& x) const;

  template <class T>
  VecX<T> f_impl(const VecX<T>& x, const VecX<T>& u, const VecX<T>& w, const T& /*t*/) const {
    using std::cos;
    using std::sin;
    const auto& P = params_;
    const T force = clamp_value(u[0], -P.force_limit, P.force_limit);
    const double total = P.cart_mass + P.pole_mass;
    const T s = sin(x[2]);
    const T c = cos(x[2]);
    const T thdot = x[3];
    const T temp = (force + P.pole_mass * P.length * thdot * thdot * s) / total;
    const T thacc = (P.gravity * s - c * temp) / (P.length * (4.0 / 3.0 - P.pole_mass * c * c / total));
    const T xacc = temp - P.pole_mass * P.length * thacc * c / total;
    VecX<T> dx(4);
    dx[0] = x[1] + w[0];
    dx[1] = xacc + w[1];
    dx[2] = thdot + w[2];
    dx[3] = thacc + w[3];
    return dx;
  }
  template <class T>
  VecX<T> g_impl(const VecX<T>& x, const VecX<T>& /*u*/, const VecX<T>& v, const T& /*t*/) const {
    return x + v;
  }

 private:
  Params params_;
};

// x' = A x + B u + G w, y = C x + D u + v.
class LinearModel : public ModelBase<LinearModel> {
 public:
  LinearModel(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C, Eigen::MatrixXd G = {},
              Eigen::MatrixXd D = {});

  Dims dims() const override;
  std::string id() const override { return "linear"; }
  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::MatrixXd& B() const { return B_; }
  const Eigen::MatrixXd& C() const { return C_; }
  const Eigen::MatrixXd& G() const { return G_; }

  template <class T>
  VecX<T> f_impl(const VecX<T>& x, const VecX<T>& u, const VecX<T>& w, const T& /*t*/) const {
    VecX<T> dx = A_.cast<T>() * x + G_.cast<T>() * w;
    if (B_.cols() > 0) dx += B_.cast<T>() * u;
    return dx;
  }
  template <class T>
  VecX<T> g_impl(const VecX<T>& x, const VecX<T>& u, const VecX<T>& v, const T& /*t*/) const {
    VecX<T> y = C_.cast<T>() * x + v;
    if (D_.cols() > 0) y += D_.cast<T>() * u;
    return y;
  }

 private:
  Eigen::MatrixXd A_, B_, C_, G_, D_;
};

// Builds a benchmark system from its id and a JSON parameter object (missing
// keys take the defaults above). Throws ConfigError("unknown system ...").
std::unique_ptr<StateSpaceModel> make_system(const std::string& id, const nlohmann::json& params);
nlohmann::json system_params(const StateSpaceModel& model);

// ---------------------------------------------------------------------------
// Input signals
// ---------------------------------------------------------------------------

class InputSignal {
 public:
  enum class Kind { Constant, Multisine, RandomHold, Samples };

  static InputSignal zero(std::size_t p);
  static InputSignal constant(Eigen::VectorXd level);
  // offset + amplitude * sum_k sin(omega_k t + phase_k) / sqrt(#omega), per
  // channel, phases drawn from rng.
  static InputSignal multisine(std::size_t p, double offset, double amplitude, std::vector<double> omegas,
                               Rng rng);
  // Piecewise-constant values ~ U(offset - bound, offset + bound), held for
  // `hold` seconds, covering [0, t_end].
  static InputSignal random_hold(std::size_t p, double bound, double hold, double t_end, Rng rng,
                                 double offset = 0.0);
  // Zero-order hold through recorded samples (rows of `values`).
  static InputSignal samples(std::vector<double> times, Eigen::MatrixXd values);

  std::size_t dim() const { return p_; }
  Kind kind() const { return kind_; }
  Eigen::VectorXd at(double t) const;

 private:
  Kind kind_ = Kind::Constant;
  std::size_t p_ = 0;
  Eigen::VectorXd level_;
  double offset_ = 0.0, amplitude_ = 0.0, hold_ = 1.0;
  std::vector<double> omegas_;
  Eigen::MatrixXd phases_;  // p x #omegas
  Eigen::MatrixXd values_;  // rows are held values
  std::vector<double> times_;
};

struct InputSpec {
  std::string kind = "constant";  // constant | multisine | random_hold
  double level = 0.0;             // constant value, or offset of the others
  double amplitude = 1.0;         // multisine amplitude
  double bound = 1.0;             // random-hold half width
  double hold = 0.1;              // random-hold period in seconds
  std::vector<double> omegas{0.1};

  InputSignal build(std::size_t p, double t_end, Rng rng) const;
};

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

enum class Method { Euler, Rk4 };
Method parse_method(const std::string& name);
std::string method_name(Method m);

class BlowUpError : public std::runtime_error {
 public:
  BlowUpError(double t, const std::string& what);
  double time() const { return time_; }

 private:
  double time_;
};

inline constexpr double kBlowUpLimit = 1e9;

struct Trajectory {
  std::vector<double> times;
  Eigen::MatrixXd states;   // N x n
  Eigen::MatrixXd inputs;   // N x p
  Eigen::MatrixXd outputs;  // N x q

  std::size_t size() const { return times.size(); }
};

// One fixed step of size dt from (x, t) with input u held and noise w held.
Eigen::VectorXd step(const StateSpaceModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     const Eigen::VectorXd& w, double t, double dt, Method method);

// Samples at t_k = k dt, k = 0..round(t_end / dt). With a noise seed, process
// noise w ~ N(0, Q / dt) is held over each step (Euler-Maruyama scaling) and
// measurement noise v ~ N(0, R) is added to each sampled output.
Trajectory integrate(const StateSpaceModel& model, const Eigen::VectorXd& x0, const InputSignal& input,
                     double t_end, double dt, Method method, std::optional<std::uint64_t> noise_seed = {});

// Noise-free simulation on an arbitrary increasing time grid with the input
// rows held between samples. `substeps` integrator steps per interval.
Trajectory simulate(const StateSpaceModel& model, const Eigen::VectorXd& x0, const std::vector<double>& times,
                    const Eigen::MatrixXd& inputs, Method method, int substeps = 1);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetMeta {
  std::string system;
  double dt = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  nlohmann::json system_params = nlohmann::json::object();
  // Start times of further independent recordings appended after the first
  // one (each restarts from x0).
  std::vector<double> segment_starts;
};

struct Dataset {
  std::vector<double> times;
  Eigen::MatrixXd inputs;        // N x p
  Eigen::MatrixXd measurements;  // N x q
  std::optional<Eigen::VectorXd> x0;
  std::optional<Eigen::MatrixXd> states;  // N x n, ground truth when synthetic
  DatasetMeta meta;

  std::size_t size() const { return times.size(); }
  std::size_t input_dim() const { return static_cast<std::size_t>(inputs.cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(measurements.cols()); }
  // Throws ConfigError when lengths differ or times are not strictly increasing.
  void validate() const;
  Dataset slice(std::size_t begin, std::size_t end) const;
  // Every `stride`-th sample, starting with the first.
  Dataset decimate(std::size_t stride) const;
  // Noise-free outputs g(x, u, 0, t) from the stored ground-truth states.
  std::optional<Eigen::MatrixXd> clean_outputs() const;
};

// [begin, end) sample range for "all", "first<T>s", "last<T>s" or
// "range:<t0>:<t1>" (seconds, t0 inclusive, t1 exclusive).
std::pair<std::size_t, std::size_t> select_window(const Dataset& data, const std::string& spec);

Dataset synthesize(const StateSpaceModel& model, const Eigen::VectorXd& x0, const InputSignal& input,
                   double t_end, double dt, std::uint64_t seed, Method method = Method::Euler);

// Root-mean-square of the row-wise Euclidean error.
double rmse(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& reference);

// Angular frequency in [lo, hi] with the largest periodogram value of the
// mean-removed measurement channel, searched on a grid of spacing `step`.
double dominant_frequency(const Dataset& data, std::size_t channel, double lo, double hi, double step = 1e-3);

// CSV: header t,u_1..u_p,y_1..y_q[,x_1..x_n]; sidecar <path>.meta.json.
void write_dataset(const std::filesystem::path& csv, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& csv);
std::string format_double(double v);

// Public cascaded-tank benchmark CSV (columns uEst,uVal,yEst,yVal[,Ts]):
// returns {estimation, validation} datasets sampled at Ts (default 4 s).
std::pair<Dataset, Dataset> read_cascaded_tank_benchmark(const std::filesystem::path& csv);

// Stand-in for the benchmark when its CSV is absent: two recordings of the
// same tank from the same initial levels, driven by independent random-hold
// inputs and simulated on a fine RK4 grid before being sampled every `dt`.
// As with the real data, neither recording carries x0 or state columns.
struct TankSurrogateSpec {
  CascadedTank::Params params{{0.5, 0.4, 0.3, 0.2}, 1.15, 0.9, 0.3, 10.0};
  double sigma_v = 0.02;
  double sigma_w = 0.005;
  std::size_t samples = 1024;
  double dt = 4.0;
  double sim_dt = 0.05;
  double input_low = 2.0, input_high = 7.0;
  double hold = 60.0;
  Eigen::Vector2d x0{3.0, 3.0};
};
std::pair<Dataset, Dataset> cascaded_tank_surrogate(std::uint64_t seed, const TankSurrogateSpec& spec = {});

}  // namespace odelearn::dynamics
