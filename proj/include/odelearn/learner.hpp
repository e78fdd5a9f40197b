// ODE-Learner: a mean network xi(t), a covariance network psi(t) = L L^T, a
// state function and an output function trained jointly so that xi and psi
// obey the extended Kalman-Bucy filter equations of the learned model while
// explaining the measurements.
//
// Per collocation (= measurement) time t_i:
//   L1 = -sum_j log N(ybar_j; mu_j, sigma2_j)            moments of the output
//   L2 = |xi(t0) - x0| + |xi'(t_i) - Xi(t_i)|            mean dynamics residual
//   L3 = |psi(t0) - P0|_F + |psi'(t_i) - Psi(t_i)|_F     covariance residual
//   L4 = a41 sum R0(w) + a42 sum R1                      sparsity / division guard
// with Xi = f(xi) + K (ybar - g(xi)), Psi = A psi + psi A^T - K C psi + Qhat and
// K = psi C^T Rhat^-1. xi' and psi' come from differentiating the networks
// with respect to time on the same tape that later yields the weight gradient.
#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "odelearn/autodiff.hpp"
#include "odelearn/dynamics.hpp"
#include "odelearn/eqlnet.hpp"
#include "odelearn/networks.hpp"

namespace odelearn::learner {

// ---------------------------------------------------------------------------
// Moments of the output
// ---------------------------------------------------------------------------

inline constexpr double kVarianceFloor = 1e-8;

template <class T>
struct Moments {
  VecX<T> mu;
  VecX<T> sigma2;
};

// Output mean and variance for x ~ N(xi, S S^T) pushed through `output`
// (parameters `p`), plus the measurement variance `r_diag` (may be empty).
// Single-layer ODE networks over identity/square/sin/cos with a constant
// denominator are handled in closed form; anything else falls back to 2n+1
// symmetric sigma points. sigma2 is floored at kVarianceFloor.
template <class T>
Moments<T> propagate_moments_factor(const Function& output, std::span<const T> p, const VecX<T>& xi,
                                    const MatX<T>& S, const VecX<T>& u, const T& t, const Eigen::VectorXd& r_diag);

// Same with the covariance itself. Throws ConfigError if psi is not
// symmetric positive semidefinite.
Moments<double> propagate_moments(const Eigen::VectorXd& xi, const Eigen::MatrixXd& psi, const Function& output,
                                  const Eigen::VectorXd& u, double t, const Eigen::VectorXd& r_diag = {});

// Whether propagate_moments uses the closed form for this output function.
bool closed_form_moments(const Function& output);

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha1 = 1.0, alpha2 = 1.0, alpha3 = 1.0, alpha4 = 0.1;
  double alpha41 = 1.0, alpha42 = 1.0;
  eqlnet::R0Params a;
  double delta = 1e-3;

  // Throws ConfigError on non-positive weights or delta.
  void validate() const;
};

// sqrt(sum v^2 + eps^2): differentiable at 0.
template <class T>
T smooth_norm(const MatX<T>& v) {
  using std::sqrt;
  T s(ad::kSmoothEps * ad::kSmoothEps);
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) s += v(i, j) * v(i, j);
  return sqrt(s);
}

// Gaussian negative log-likelihood. Throws ConfigError if a variance is not
// positive.
template <class T>
T loss_l1(const VecX<T>& ybar, const VecX<T>& mu, const VecX<T>& sigma2) {
  using std::log;
  T out(0.0);
  for (Eigen::Index j = 0; j < ybar.size(); ++j) {
    if (!(ad::value_of(sigma2[j]) > 0.0)) throw ConfigError("negative log-likelihood: variance must be positive");
    const T r = ybar[j] - mu[j];
    out += 0.5 * log(2.0 * std::numbers::pi * sigma2[j]) + r * r / (2.0 * sigma2[j]);
  }
  return out;
}

template <class T>
T loss_l2(const VecX<T>& xi0, const VecX<T>& x0, const VecX<T>& xi_dot, const VecX<T>& Xi) {
  return smooth_norm<T>(xi0 - x0) + smooth_norm<T>(xi_dot - Xi);
}

template <class T>
T loss_l3(const MatX<T>& psi0, const MatX<T>& P0, const MatX<T>& psi_dot, const MatX<T>& Psi) {
  return smooth_norm<T>(psi0 - P0) + smooth_norm<T>(psi_dot - Psi);
}

// a41 sum_w R0(w) + a42 sum_m R1 with R1 = smooth max(0, delta - o.w4_m).
template <class T>
T loss_l4(std::span<const T> weights, std::span<const T> denominators, const LossWeights& lw) {
  T r0(0.0), r1(0.0);
  for (const T& w : weights) r0 += eqlnet::reg_r0(w, lw.a);
  for (const T& d : denominators) r1 += ad::max_smooth(T(lw.delta) - d);
  return lw.alpha41 * r0 + lw.alpha42 * r1;
}

struct LossComponents {
  double l1 = 0.0, l2 = 0.0, l3 = 0.0, l4 = 0.0;
};

// (1/N) sum_i (a1 L1_i + a2 L2_i + a3 L3_i + a4 L4_i).
double total_loss(std::span<const LossComponents> per_sample, const LossWeights& w);
double weighted(const LossComponents& c, const LossWeights& w);

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

struct LearnerNetworks {
  TimeNet mean;
  TimeNet cov;  // n(n+1)/2 outputs, row-major lower triangle of L / cov_scale
  double cov_scale = 0.1;
  LearnedModel model;
  Eigen::MatrixXd P0;
  Eigen::VectorXd x0;
  bool x0_trainable = false;

  LearnerNetworks(TimeNet mean_net, TimeNet cov_net, double cov_scale_, LearnedModel model_, Eigen::MatrixXd P0_,
                  Eigen::VectorXd x0_, bool x0_trainable_);

  Dims dims() const { return model.dims(); }

  struct Blocks {
    std::size_t mean = 0, cov = 0, state = 0, output = 0, x0 = 0, total = 0;
  };
  // Offsets of the blocks of the flat parameter vector.
  Blocks blocks() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> theta);
  // 1 for weights training must leave alone.
  std::vector<std::uint8_t> frozen_mask() const;

  template <class T>
  MatX<T> cov_factor(std::span<const T> p_cov, const T& t) const {
    return factor_from_raw<T>(cov.forward<T>(p_cov, t));
  }
  template <class T>
  MatX<T> factor_from_raw(const VecX<T>& raw) const {
    const auto n = static_cast<Eigen::Index>(dims().n);
    MatX<T> L = MatX<T>::Zero(n, n);
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) L(i, j) = cov_scale * raw[c++];
    return L;
  }

  Eigen::VectorXd mean_at(double t) const;
  Eigen::MatrixXd cov_at(double t) const;
};

struct ArchitectureConfig {
  // State function: "odenet", "mlp" or "parametric".
  std::string state_kind = "odenet";
  std::string state_ops = "identity,sin,cos,square,cube";
  std::size_t state_neurons = 4;
  std::size_t state_branches = 1;
  std::size_t state_layers = 1;
  bool raw_time = true;
  std::vector<double> omegas;  // sin/cos(omega t) inputs of the state function
  eqlnet::PriorKnowledge state_prior;
  std::vector<std::size_t> state_hidden{16, 16};  // "mlp"
  std::string parametric_system;                   // "parametric"
  std::vector<double> parametric_init;
  std::vector<std::uint8_t> parametric_frozen;
  // {lo, hi}: start the parametric duffing omega0 at the periodogram peak of
  // the first output within [lo, hi] instead of parametric_init.
  std::vector<double> omega_search;

  std::string output_ops = "identity";
  std::size_t output_neurons = 1;
  eqlnet::PriorKnowledge output_prior;
  bool output_trainable = true;

  std::size_t mean_fourier = 24;
  std::vector<std::size_t> mean_hidden{32};
  std::size_t cov_fourier = 4;
  std::vector<std::size_t> cov_hidden{8};
  double cov_scale = 0.1;

  double init_scale = 0.1;
  double delta = 1e-3;

  Eigen::VectorXd q_diag;  // process noise density (n), default 1e-4
  Eigen::VectorXd r_diag;  // measurement noise (q), default 1e-4
  double p0 = 0.1;         // P0 = p0 I

  std::size_t n = 0;  // number of states
};

// Builds and initializes the four networks for `data` (time span, input and
// output dimensions, x0 if recorded).
LearnerNetworks build_networks(const ArchitectureConfig& arch, const dynamics::Dataset& data, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Loss evaluation
// ---------------------------------------------------------------------------

struct BatchResult {
  LossComponents components;  // means over the batch (initial terms added once)
  double total = 0.0;
  std::vector<double> gradient;  // d total / d theta (empty unless requested)
  bool finite = true;
};

// Loss over the samples `indices` of `data` at parameters `theta`.
BatchResult evaluate_batch(const LearnerNetworks& nets, std::span<const double> theta, const dynamics::Dataset& data,
                           std::span<const std::size_t> indices, const LossWeights& w, bool with_gradient,
                           ad::Tape& tape);

// Every sample at the current parameters.
BatchResult evaluate_all(const LearnerNetworks& nets, const dynamics::Dataset& data, const LossWeights& w);

// Per-sample components without the initial-condition and R0 terms, which
// are shared by all samples.
std::vector<LossComponents> sample_components(const LearnerNetworks& nets, const dynamics::Dataset& data,
                                              const LossWeights& w);

// Sum over samples of |dx/dt - f(x, u, t)|^2 plus |x(t0) - x0|^2 for the mean
// network x(t) and the model's noise-free right-hand side.
double loss_pinn(const TimeNet& mean, std::span<const double> p, const StateSpaceModel& f,
                 const dynamics::Dataset& data, const Eigen::VectorXd& x0, std::vector<double>* gradient = nullptr);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  int phase = 1;
  LossComponents components;
  double total = 0.0;
};

struct TrainConfig {
  LossWeights weights;
  std::string mode = "ekbf";  // "ekbf" or "pinn"
  double learning_rate = 1e-3;
  double learning_rate_final = -1.0;  // cosine decay target; < 0 keeps it constant
  std::size_t epochs_fit = 100;       // phase 1, alpha4 = 0
  std::size_t epochs_sparse = 100;    // phase 2, alpha4 on
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int max_bad_steps = 5;
  // Divergence also when an epoch's mean loss exceeds the initial one by
  // more than divergence_factor * max(1, |initial|).
  double divergence_factor = 1e6;
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const;
};

struct TrainReport {
  LossComponents initial;
  double initial_total = 0.0;
  LossComponents final;
  double final_total = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::size_t rejected_steps = 0;
  bool diverged = false;
  std::string divergence_message;
  double wall_seconds = 0.0;
};

// Adam over the non-frozen entries of the flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, double beta1, double beta2, double eps);
  void step(std::vector<double>& theta, const std::vector<double>& grad, const std::vector<std::uint8_t>& frozen,
            double lr);

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

TrainReport train(LearnerNetworks& nets, const dynamics::Dataset& data, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints and use of the identified model
// ---------------------------------------------------------------------------

nlohmann::json to_json(const LearnerNetworks& nets);
LearnerNetworks learner_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const LearnerNetworks& nets);
LearnerNetworks load_checkpoint(const std::filesystem::path& path);

// Open-loop noise-free simulation of the identified model over the dataset's
// time grid and inputs, from `x0` (default: the learner's x0).
dynamics::Trajectory simulate_identified(const LearnerNetworks& nets, const dynamics::Dataset& data,
                                         dynamics::Method method, int substeps = 1,
                                         std::optional<Eigen::VectorXd> x0 = {});

// Symbolic form of each state derivative when the state function is an ODE
// network; empty otherwise.
std::vector<std::string> identified_equations(const LearnerNetworks& nets, double prune_tol);

}  // namespace odelearn::learner
