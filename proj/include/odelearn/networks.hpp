// Parameterized building blocks of the learner: plain tanh networks, networks
// of normalized time, and the trainable state/output functions that make up a
// learned state-space model.
#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "odelearn/autodiff.hpp"
#include "odelearn/eqlnet.hpp"
#include "odelearn/model.hpp"
#include "odelearn/random.hpp"

namespace odelearn::learner {

// Fully connected network with tanh hidden layers and a linear output layer.
// Parameters per layer: weights (out x in, row-major) followed by biases.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t out);

  // Glorot-uniform weights, zero biases; the output layer is scaled by
  // `out_scale`.
  void init(Rng& rng, double out_scale = 1.0);

  std::size_t in_dim() const { return sizes_.front(); }
  std::size_t out_dim() const { return sizes_.back(); }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t num_params() const { return params.size(); }
  std::size_t output_bias_offset() const;

  template <class T>
  VecX<T> forward(std::span<const T> p, const VecX<T>& x) const {
    using std::tanh;
    VecX<T> h = x;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      const bool last = l + 2 == sizes_.size();
      VecX<T> next(static_cast<Eigen::Index>(out));
      for (std::size_t o = 0; o < out; ++o) {
        T s = p[off + out * in + o];
        const T* w = p.data() + off + o * in;
        for (std::size_t i = 0; i < in; ++i) s += w[i] * h[static_cast<Eigen::Index>(i)];
        next[static_cast<Eigen::Index>(o)] = last ? s : tanh(s);
      }
      off += out * in + out;
      h = std::move(next);
    }
    return h;
  }

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

  std::vector<double> params;

 private:
  std::vector<std::size_t> sizes_{1, 1};
};

// t -> R^m through Fourier features of tau = (t - t0) / span in [0, 1]:
// [2 tau - 1, sin(k pi tau), cos(k pi tau) for k = 1..K].
//
// With several segments (independent recordings laid out back to back on one
// time axis) each segment gets its own weights and its own normalization;
// forward() picks the segment containing t.
class TimeNet {
 public:
  TimeNet() = default;
  TimeNet(std::size_t out, std::size_t fourier, std::vector<std::size_t> hidden, double t0, double span);
  TimeNet(std::size_t out, std::size_t fourier, std::vector<std::size_t> hidden, std::vector<double> starts,
          std::vector<double> spans);

  void init(Rng& rng, double out_scale = 1.0);
  std::size_t out_dim() const { return mlp_.out_dim(); }
  std::size_t fourier() const { return fourier_; }
  std::size_t segments() const { return starts_.size(); }
  double t0() const { return starts_.front(); }
  double start(std::size_t k) const { return starts_.at(k); }
  double span(std::size_t k = 0) const { return spans_.at(k); }
  std::size_t segment_of(double t) const;
  // Offset of segment k's output-layer biases in params().
  std::size_t output_bias_offset(std::size_t k = 0) const { return k * per_segment() + mlp_.output_bias_offset(); }
  std::size_t per_segment() const { return mlp_.num_params(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  template <class T>
  VecX<T> forward(std::span<const T> p, const T& t) const {
    using std::cos;
    using std::sin;
    const std::size_t seg = segment_of(ad::value_of(t));
    const T tau = (t - starts_[seg]) * (1.0 / spans_[seg]);
    VecX<T> feat(static_cast<Eigen::Index>(1 + 2 * fourier_));
    feat[0] = 2.0 * tau - 1.0;
    for (std::size_t k = 1; k <= fourier_; ++k) {
      const T a = (std::numbers::pi * static_cast<double>(k)) * tau;
      feat[static_cast<Eigen::Index>(2 * k - 1)] = sin(a);
      feat[static_cast<Eigen::Index>(2 * k)] = cos(a);
    }
    return mlp_.forward<T>(p.subspan(seg * per_segment(), per_segment()), feat);
  }

  nlohmann::json to_json() const;
  static TimeNet from_json(const nlohmann::json& j);

 private:
  Mlp mlp_;  // layer shape only; the weights live in params_
  std::size_t fourier_ = 0;
  std::vector<double> starts_{0.0}, spans_{1.0};
  std::vector<double> params_;
};

// A trainable map (x, u, t) -> R^m with a flat parameter vector.
class Function {
 public:
  virtual ~Function() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t out_dim() const = 0;
  virtual std::vector<double>& params() = 0;
  virtual const std::vector<double>& params() const = 0;
  virtual std::vector<std::uint8_t>& frozen() = 0;
  virtual const std::vector<std::uint8_t>& frozen() const = 0;

  virtual Eigen::VectorXd eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                               double t) const = 0;
  virtual VecV eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const = 0;

  // o.w4 per output for division layers (empty when there is none).
  virtual VecV denominators(std::span<const Var> /*p*/, const VecV& /*x*/, const VecV& /*u*/,
                            const Var& /*t*/) const {
    return {};
  }
  virtual double delta() const { return 0.0; }
  // Whether the sparsity regularizer applies to this function's weights.
  virtual bool sparsified() const { return false; }

  virtual nlohmann::json to_json() const = 0;
  virtual std::unique_ptr<Function> clone() const = 0;

  Eigen::VectorXd eval(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double t) const {
    return eval(std::span<const double>(params()), x, u, t);
  }
};

// ODE network from eqlnet (noise enters additively outside the network).
class NetworkFunction : public Function {
 public:
  explicit NetworkFunction(eqlnet::OdeNetwork net);

  std::string kind() const override { return "odenet"; }
  std::size_t out_dim() const override { return net_.outputs(); }
  std::vector<double>& params() override { return net_.params(); }
  const std::vector<double>& params() const override { return net_.params(); }
  std::vector<std::uint8_t>& frozen() override { return net_.frozen(); }
  const std::vector<std::uint8_t>& frozen() const override { return net_.frozen(); }

  Eigen::VectorXd eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       double t) const override;
  VecV eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const override;
  VecV denominators(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const override;
  double delta() const override { return net_.delta(); }
  bool sparsified() const override { return true; }

  nlohmann::json to_json() const override;
  std::unique_ptr<Function> clone() const override { return std::make_unique<NetworkFunction>(*this); }

  const eqlnet::OdeNetwork& network() const { return net_; }
  eqlnet::OdeNetwork& network() { return net_; }

 private:
  eqlnet::OdeNetwork net_;
};

// Plain tanh network on the assembled inputs (ablation of the ODE network).
class MlpFunction : public Function {
 public:
  MlpFunction(eqlnet::InputLayout layout, Mlp mlp);

  std::string kind() const override { return "mlp"; }
  std::size_t out_dim() const override { return mlp_.out_dim(); }
  std::vector<double>& params() override { return mlp_.params; }
  const std::vector<double>& params() const override { return mlp_.params; }
  std::vector<std::uint8_t>& frozen() override { return frozen_; }
  const std::vector<std::uint8_t>& frozen() const override { return frozen_; }

  Eigen::VectorXd eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       double t) const override;
  VecV eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const override;

  nlohmann::json to_json() const override;
  std::unique_ptr<Function> clone() const override { return std::make_unique<MlpFunction>(*this); }

 private:
  eqlnet::InputLayout layout_;
  Mlp mlp_;
  std::vector<std::uint8_t> frozen_;
};

// Known right-hand side with unknown real-valued parameters:
//   "duffing":       [b1, b2, b3, b4, omega0]
//   "cascaded_tank": [k1, k2, k3, k4]
class ParametricFunction : public Function {
 public:
  ParametricFunction(std::string system, std::vector<double> values);

  static std::vector<std::string> parameter_names(const std::string& system);

  std::string kind() const override { return "parametric"; }
  std::size_t out_dim() const override { return 2; }
  std::vector<double>& params() override { return values_; }
  const std::vector<double>& params() const override { return values_; }
  std::vector<std::uint8_t>& frozen() override { return frozen_; }
  const std::vector<std::uint8_t>& frozen() const override { return frozen_; }
  const std::string& system() const { return system_; }

  Eigen::VectorXd eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       double t) const override {
    return eval_impl<double>(p, x, u, t);
  }
  VecV eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const override {
    return eval_impl<Var>(p, x, u, t);
  }

  nlohmann::json to_json() const override;
  std::unique_ptr<Function> clone() const override { return std::make_unique<ParametricFunction>(*this); }

 private:
  template <class T>
  VecX<T> eval_impl(std::span<const T> p, const VecX<T>& x, const VecX<T>& u, const T& t) const {
    using std::cos;
    VecX<T> dx(2);
    if (system_ == "duffing") {
      dx[0] = x[1];
      dx[1] = p[0] * x[1] + p[1] * x[0] + p[2] * x[0] * x[0] * x[0] - p[3] * cos(p[4] * t);
    } else {
      const T s1 = smooth_sqrt(x[0]);
      dx[0] = -p[0] * s1 + p[3] * u[0];
      dx[1] = p[1] * s1 - p[2] * smooth_sqrt(x[1]);
    }
    return dx;
  }

  std::string system_;
  std::vector<double> values_;
  std::vector<std::uint8_t> frozen_;
};

std::unique_ptr<Function> function_from_json(const nlohmann::json& j);

// State-space model x' = state(x, u, t) + w, y = output(x, u, t) + v.
//
// The Var overloads evaluate with parameters bound through bind(), so the
// EKBF linearization can run on the training tape; unbound, they use the
// stored parameters as constants.
class LearnedModel : public StateSpaceModel {
 public:
  LearnedModel(std::unique_ptr<Function> state, std::unique_ptr<Function> output, std::size_t p,
               NoiseModel noise);
  LearnedModel(const LearnedModel& other);
  LearnedModel& operator=(const LearnedModel& other);

  Dims dims() const override { return {state_->out_dim(), p_, output_->out_dim()}; }
  std::string id() const override { return "learned"; }

  Eigen::VectorXd f(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                    double t) const override;
  VecV f(const VecV& x, const VecV& u, const VecV& w, const Var& t) const override;
  Eigen::VectorXd g(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                    double t) const override;
  VecV g(const VecV& x, const VecV& u, const VecV& v, const Var& t) const override;

  void bind(std::span<const Var> state_params, std::span<const Var> output_params) const;
  void unbind() const;

  Function& state() { return *state_; }
  const Function& state() const { return *state_; }
  Function& output() { return *output_; }
  const Function& output() const { return *output_; }

 private:
  std::unique_ptr<Function> state_, output_;
  std::size_t p_ = 0;
  mutable std::span<const Var> bound_state_, bound_output_;
  mutable bool bound_ = false;
};

}  // namespace odelearn::learner
