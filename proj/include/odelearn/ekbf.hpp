// Continuous-time extended Kalman-Bucy filter.
//
//   xhat' = f(xhat, u, 0, t) + K (ybar - g(xhat, u, 0, t))
//   P'    = A P + P A^T - K C P + Qhat,      K = P C^T Rhat^-1
//
// with A, G, C, V the Jacobians of f and g with respect to x, w, x, v at the
// current mean and Qhat = G Q G^T, Rhat = V R V^T. R is the spectral density
// of the measurement noise as seen by the continuous filter.
//
// The right-hand sides are templated so the learner can evaluate them on
// autodiff Vars and differentiate through them.
#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <vector>

#include "odelearn/dynamics.hpp"
#include "odelearn/model.hpp"

namespace odelearn::ekbf {

class FilterConfigError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(double t, const std::string& what) : std::runtime_error(what), time_(t) {}
  double time() const { return time_; }

 private:
  double time_;
};

inline constexpr double kDivergenceLimit = 1e9;

template <class T>
struct Linearization {
  MatX<T> A, G, C, V, Qhat, Rhat;
};
using LinearizedSystem = Linearization<double>;

// Jacobians at (xhat, u, noise = 0, t) and Qhat = G Q G^T, Rhat = V R V^T
// from `noise`. Throws FilterConfigError when Rhat is singular.
LinearizedSystem linearize(const StateSpaceModel& model, const Eigen::VectorXd& xhat, const Eigen::VectorXd& u,
                           double t, const NoiseModel& noise);
inline LinearizedSystem linearize(const StateSpaceModel& model, const Eigen::VectorXd& xhat,
                                  const Eigen::VectorXd& u, double t) {
  return linearize(model, xhat, u, t, model.noise());
}

// Same on the tape: entries stay differentiable with respect to whatever
// produced `xhat` (and the model's own parameters).
Linearization<Var> linearize_graph(ad::Tape& tape, const StateSpaceModel& model, const VecV& xhat, const VecV& u,
                                   const Var& t, const NoiseModel& noise);

// Solves M X = B for symmetric positive-definite M by an unpivoted Cholesky
// factorization written for any scalar type. Throws FilterConfigError when a
// pivot is not positive.
template <class T>
MatX<T> spd_solve(const MatX<T>& M, const MatX<T>& B) {
  using std::sqrt;
  const Eigen::Index n = M.rows();
  MatX<T> L = MatX<T>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    T d = M(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d = d - L(j, k) * L(j, k);
    if (!(ad::value_of(d) > 0.0)) throw FilterConfigError("measurement covariance Rhat is singular");
    L(j, j) = sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      T s = M(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s = s - L(i, k) * L(j, k);
      L(i, j) = s / L(j, j);
    }
  }
  MatX<T> X = B;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      T s = X(i, c);
      for (Eigen::Index k = 0; k < i; ++k) s = s - L(i, k) * X(k, c);
      X(i, c) = s / L(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      T s = X(i, c);
      for (Eigen::Index k = i + 1; k < n; ++k) s = s - L(k, i) * X(k, c);
      X(i, c) = s / L(i, i);
    }
  }
  return X;
}

// K = P C^T Rhat^-1.
template <class T>
MatX<T> kalman_gain(const MatX<T>& P, const MatX<T>& C, const MatX<T>& Rhat) {
  const MatX<T> CP = C * P;  // q x n, equals (P C^T)^T for symmetric P
  return spd_solve<T>(Rhat, CP).transpose();
}

template <class T>
VecX<T> mean_rhs(const StateSpaceModel& model, const VecX<T>& xhat, const VecX<T>& u, const VecX<T>& ybar,
                 const MatX<T>& K, const T& t) {
  const auto d = model.dims();
  const VecX<T> w = VecX<T>::Zero(static_cast<Eigen::Index>(d.n));
  const VecX<T> v = VecX<T>::Zero(static_cast<Eigen::Index>(d.q));
  return model.f(xhat, u, w, t) + K * (ybar - model.g(xhat, u, v, t));
}

template <class T>
MatX<T> cov_rhs(const MatX<T>& A, const MatX<T>& P, const MatX<T>& K, const MatX<T>& C, const MatX<T>& Qhat) {
  return A * P + P * A.transpose() - K * (C * P) + Qhat;
}

struct FilterConfig {
  dynamics::Method method = dynamics::Method::Rk4;
  int substeps = 4;
  // Upper bound on the substeps taken when the gain makes the interval stiff.
  int max_substeps = 20000;
  // Stability target for h * max(|A|, |K C|) (infinity norms).
  double stiffness_bound = 1.0;
};

struct FilterState {
  double t = 0.0;
  Eigen::VectorXd xhat;
  Eigen::MatrixXd P;
  Eigen::MatrixXd K;           // gain recomputed from the emitted P and xhat
  Eigen::VectorXd innovation;  // ybar(t) - g(xhat, u, 0, t) before ybar(t) is used
  Eigen::MatrixXd S;           // C P C^T + Rhat / dt: predicted innovation covariance
};

// Symmetrizes P and clips negative eigenvalues to zero.
void condition_covariance(Eigen::MatrixXd& P);

// Integrates mean and covariance jointly between measurement times with the
// measurement held (zero-order hold). Emits one state per sample time.
// P0 defaults to 0.1 I when empty. Throws DivergenceError if |P|_inf > 1e9.
std::vector<FilterState> run_filter(const StateSpaceModel& model, const dynamics::Dataset& data,
                                    const Eigen::VectorXd& x0, Eigen::MatrixXd P0 = {},
                                    const FilterConfig& config = {});

}  // namespace odelearn::ekbf
