// Swing-up and stabilization of the cart-pole: reward and switching rules,
// receding-horizon control on a (learned or true) model, LQR on its
// linearization, and the model-based RL episode loop.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "odelearn/dynamics.hpp"
#include "odelearn/learner.hpp"
#include "odelearn/model.hpp"

namespace odelearn::control {

// Maps an angle to (-pi, pi].
double wrap_angle(double a);

inline constexpr double kRewardFloor = -6.0;

// Mean of -|theta| over the last d samples (wrapped angles), floored at -6.
double reward(std::span<const double> theta, std::size_t d);

struct RlLoopConfig {
  double episode_length = 2.0;
  double dt = 0.004;
  std::size_t max_episodes = 6;
  std::size_t reward_window = 125;  // d, in samples
  double stable_threshold = -0.2;
  double switch_angle = std::numbers::pi / 6.0;
  double switch_fraction = 0.95;
  double switch_window = 0.2;
  std::size_t angle_index = 2;

  // Exploration episode: piecewise-constant random force.
  double random_bound = 25.0;
  double random_hold = 0.1;

  // Use the true model for control instead of the learned one.
  bool oracle = false;

  void validate() const;
};

// True iff at least switch_fraction of the samples in the last switch_window
// seconds satisfy |theta| < switch_angle. False with too little history.
bool switch_criterion(std::span<const double> theta, double dt, const RlLoopConfig& config);

// ---------------------------------------------------------------------------
// MPC
// ---------------------------------------------------------------------------

struct MpcConfig {
  double horizon = 1.0;
  double control_dt = 0.02;
  double u_max = 25.0;
  int iterations = 30;
  std::size_t memory = 8;  // L-BFGS history
  dynamics::Method method = dynamics::Method::Rk4;
  int substeps = 4;  // integrator steps per control interval

  // "angle": mean |wrapped x[angle_index]| over the horizon grid plus
  // effort_weight * sum u^2.
  // "quadratic": sum over the grid of control_dt (x'Qx + u'Ru) plus x_N' Pf x_N.
  std::string cost = "angle";
  double effort_weight = 1e-4;
  std::size_t angle_index = 2;
  Eigen::MatrixXd Q, R, Pf;

  std::size_t steps() const;
  void validate() const;
};

struct MpcPlan {
  Eigen::MatrixXd inputs;  // steps x p, piecewise constant
  double cost = 0.0;
  double zero_cost = 0.0;  // cost of u = 0 over the same horizon
  int iterations = 0;
  int evaluations = 0;
};

// Cost of holding `inputs` from x at time t; +inf when the rollout blows up.
double mpc_cost(const StateSpaceModel& model, const Eigen::VectorXd& x, double t, const Eigen::MatrixXd& inputs,
                const MpcConfig& config);

// Projected L-BFGS over the input sequence, started from `warm` (zeros when
// empty). Never returns a plan costlier than u = 0.
MpcPlan mpc_plan(const StateSpaceModel& model, const Eigen::VectorXd& x, double t, const MpcConfig& config,
                 const Eigen::MatrixXd& warm = {});

// Drops the first row and repeats the last one.
Eigen::MatrixXd shift_plan(const Eigen::MatrixXd& plan);

// ---------------------------------------------------------------------------
// LQR
// ---------------------------------------------------------------------------

class NotStabilizableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LqrSolution {
  Eigen::MatrixXd K, P;
  double residual = 0.0;  // Frobenius norm of the Riccati residual
};

// Continuous-time LQR: K = Rc^-1 B' P with A'P + PA - PB Rc^-1 B'P + Qc = 0.
// Throws NotStabilizableError when some mode with Re >= 0 is uncontrollable,
// ConfigError on bad shapes, an asymmetric or indefinite Qc, or a Rc that is
// not positive definite.
LqrSolution lqr(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Qc,
                const Eigen::MatrixXd& Rc);
inline Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Qc,
                                const Eigen::MatrixXd& Rc) {
  return lqr(A, B, Qc, Rc).K;
}

// X with A X + X A' + C = 0 for Hurwitz A.
Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C);

double spectral_abscissa(const Eigen::MatrixXd& A);

// (df/dx, df/du) of the noise-free dynamics at (x, u, t).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> linearize_dynamics(const StateSpaceModel& model, const Eigen::VectorXd& x,
                                                               const Eigen::VectorXd& u, double t);

// ---------------------------------------------------------------------------
// Episodes and the RL loop
// ---------------------------------------------------------------------------

struct ControllerConfig {
  MpcConfig mpc;
  Eigen::MatrixXd Qc;  // default diag(1, 1, 10, 1)
  double Rc = 0.1;
};

// MPC until the switching criterion holds, then LQR about the upright
// equilibrium with the cart coasting at its switch-time velocity. Falls back
// to MPC when the pole drops below the horizontal.
class SwingUpController {
 public:
  SwingUpController(const StateSpaceModel& model, MpcConfig mpc, Eigen::MatrixXd Qc, double Rc,
                    const RlLoopConfig& loop);

  // Input for the sample at time t given the state estimate and the angle
  // history so far (including this sample).
  Eigen::VectorXd act(double t, const Eigen::VectorXd& x, std::span<const double> theta_history);

  bool lqr_active() const { return lqr_active_; }
  const Eigen::MatrixXd& gain() const { return K_; }
  std::optional<double> first_switch() const { return first_switch_; }
  std::size_t plans() const { return plans_; }

 private:
  const StateSpaceModel* model_;
  MpcConfig mpc_;
  RlLoopConfig loop_;
  Eigen::MatrixXd K_;
  Eigen::MatrixXd plan_;
  Eigen::VectorXd u_hold_, x_ref_;
  double next_plan_ = -1.0, t_switch_ = 0.0;
  bool lqr_active_ = false;
  std::optional<double> first_switch_;
  std::size_t plans_ = 0;
};

struct EpisodeLog {
  std::size_t index = 0;
  std::string kind;  // "random" or "mpc"
  dynamics::Dataset data;  // times from 0, noisy measurements, true states
  std::vector<double> reward_to_date;
  double reward = 0.0;
  std::optional<double> switch_time;
  double model_rmse = std::numeric_limits<double>::quiet_NaN();
  std::string checkpoint;
  bool training_failed = false;
  std::string note;
};

struct RlLog {
  std::vector<EpisodeLog> episodes;
  bool success = false;
  std::optional<std::size_t> success_episode;
};

struct RlLearnerConfig {
  learner::ArchitectureConfig arch;
  learner::TrainConfig train;
};

// Default learner set-up for the cart-pole (all states measured).
RlLearnerConfig default_cartpole_learner();

// One episode on `truth` from x0 driven by `controller` (or by a random force
// when null). Measurement noise comes from the truth model's R.
EpisodeLog run_episode(const StateSpaceModel& truth, SwingUpController* controller, const Eigen::VectorXd& x0,
                       double length, const RlLoopConfig& config, std::uint64_t seed);

// Random episode, then up to max_episodes rounds of train-on-everything and
// one controlled episode, stopping once an episode's reward exceeds the
// stability threshold. Writes CSVs, checkpoints and summary.json into
// `out_dir` when it is non-empty.
RlLog run_rl_loop(const StateSpaceModel& truth, const RlLearnerConfig& learner_config, const RlLoopConfig& config,
                  const ControllerConfig& controller, std::uint64_t seed, const std::filesystem::path& out_dir = {});

// Episode CSV: t,u_1..u_p,x_1..x_n,reward.
void write_episode_csv(const std::filesystem::path& path, const EpisodeLog& ep);
nlohmann::json summary_json(const RlLog& log);

}  // namespace odelearn::control
