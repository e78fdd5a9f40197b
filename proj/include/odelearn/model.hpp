// State-space models x' = f(x, u, w, t), y = g(x, u, v, t) with Gaussian
// process noise w ~ N(0, Q) and measurement noise v ~ N(0, R).
//
// Ground-truth benchmark systems and learned networks both implement this
// interface. Every model evaluates on doubles (simulation) and on autodiff
// Vars (linearization, training, MPC gradients).
#pragma once

#include <Eigen/Core>

#include <memory>
#include <stdexcept>
#include <string>

#include "odelearn/autodiff.hpp"

namespace odelearn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NoiseModel {
  Eigen::MatrixXd Q;  // n x n, symmetric PSD
  Eigen::MatrixXd R;  // q x q, symmetric PD

  static NoiseModel diagonal(const Eigen::VectorXd& q_diag, const Eigen::VectorXd& r_diag);
  // Throws ConfigError on asymmetry above 1e-12, an indefinite Q, or an R
  // whose Cholesky factorization fails.
  void validate() const;
};

struct Dims {
  std::size_t n = 0;  // states
  std::size_t p = 0;  // inputs
  std::size_t q = 0;  // outputs
};

class StateSpaceModel {
 public:
  virtual ~StateSpaceModel() = default;

  virtual Dims dims() const = 0;
  virtual std::string id() const = 0;

  virtual Eigen::VectorXd f(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                            double t) const = 0;
  virtual VecV f(const VecV& x, const VecV& u, const VecV& w, const Var& t) const = 0;
  virtual Eigen::VectorXd g(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                            double t) const = 0;
  virtual VecV g(const VecV& x, const VecV& u, const VecV& v, const Var& t) const = 0;

  // Hook applied after every integration step (e.g. nonnegative tank levels).
  virtual void project_state(Eigen::VectorXd& /*x*/) const {}

  const NoiseModel& noise() const { return noise_; }
  void set_noise(NoiseModel noise);

  Eigen::VectorXd f0(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double t) const {
    return f(x, u, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dims().n)), t);
  }
  Eigen::VectorXd g0(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double t) const {
    return g(x, u, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dims().q)), t);
  }

 protected:
  NoiseModel noise_;
};

// Implements the double/Var virtual pairs by forwarding to
// `Derived::template f_impl<T>` and `Derived::template g_impl<T>`.
template <class Derived>
class ModelBase : public StateSpaceModel {
 public:
  Eigen::VectorXd f(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                    double t) const override {
    return self().template f_impl<double>(x, u, w, t);
  }
  VecV f(const VecV& x, const VecV& u, const VecV& w, const Var& t) const override {
    return self().template f_impl<Var>(x, u, w, t);
  }
  Eigen::VectorXd g(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                    double t) const override {
    return self().template g_impl<double>(x, u, v, t);
  }
  VecV g(const VecV& x, const VecV& u, const VecV& v, const Var& t) const override {
    return self().template g_impl<Var>(x, u, v, t);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

template <class T>
VecX<T> to_scalar(const Eigen::VectorXd& v) {
  VecX<T> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = T(v[i]);
  return out;
}

}  // namespace odelearn
