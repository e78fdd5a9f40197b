// Operator neurons and the ODE network built from them.
//
// A neuron with I multiplicative branches over K operators computes
//
//   o = prod_i ( W2[i,K] + sum_k W2[i,k] * op_k( sum_l W1[i,k,l] z[l] ) )
//
// on z = [1, z_1, ..., z_O]. Layers of neurons are stacked like a dense
// network; each output dimension is the guarded ratio o.w3 / o.w4 of the last
// layer's outputs o = [1, o_1, ..., o_N] (zero when o.w4 <= delta).
//
// All weights live in one flat parameter vector so the learner can swap in
// autodiff variables.
#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "odelearn/autodiff.hpp"
#include "odelearn/math.hpp"
#include "odelearn/model.hpp"
#include "odelearn/random.hpp"

namespace odelearn::eqlnet {

class CapacityError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

enum class OpKind { Identity, Sin, Cos, Square, Cube, Sqrt, Exp, Tanh };

std::string op_name(OpKind op);
OpKind parse_op(const std::string& name);

template <class T>
T apply_op(OpKind op, const T& z) {
  using std::cos;
  using std::exp;
  using std::sin;
  using std::tanh;
  switch (op) {
    case OpKind::Identity: return z;
    case OpKind::Sin: return sin(z);
    case OpKind::Cos: return cos(z);
    case OpKind::Square: return z * z;
    case OpKind::Cube: return z * z * z;
    case OpKind::Sqrt: return smooth_sqrt(z);
    case OpKind::Exp: return exp(z);
    case OpKind::Tanh: return tanh(z);
  }
  return z;
}

struct OperatorSet {
  std::vector<OpKind> ops;

  OperatorSet() = default;
  explicit OperatorSet(std::vector<OpKind> o);
  // Comma separated names, e.g. "identity,sin,cube".
  static OperatorSet parse(const std::string& list);

  std::size_t size() const { return ops.size(); }
  std::optional<std::size_t> index_of(OpKind op) const;
  std::vector<std::string> names() const;
};

// One operator neuron: the product over branches of
// bias + sum_k scale_k op_k(w . z). `W1` holds I*K*(O+1) entries in (i, k, l)
// order and `W2` holds I*(K+1) entries in (i, k) order with the branch bias at k = K.
// `z` has length O+1 and z[0] = 1.
template <class T>
T neuron_forward(std::span<const T> W1, std::span<const T> W2, std::size_t I, const OperatorSet& ops,
                 const VecX<T>& z) {
  const std::size_t K = ops.size();
  const auto L = static_cast<std::size_t>(z.size());
  if (W1.size() != I * K * L || W2.size() != I * (K + 1))
    throw ConfigError("operator neuron: weight shapes do not match the input");
  T out(1.0);
  for (std::size_t i = 0; i < I; ++i) {
    T branch = W2[i * (K + 1) + K];
    for (std::size_t k = 0; k < K; ++k) {
      const T& scale = W2[i * (K + 1) + k];
      if (ad::value_of(scale) == 0.0 && std::is_same_v<T, double>) continue;
      const T* w = W1.data() + (i * K + k) * L;
      T arg = w[0] * z[0];
      for (std::size_t l = 1; l < L; ++l) arg += w[l] * z[static_cast<Eigen::Index>(l)];
      branch += scale * apply_op(ops.ops[k], arg);
    }
    out = i == 0 ? branch : out * branch;
  }
  return out;
}

// Network inputs: [x (n), u (p), w (nw), t (optional), sin/cos(omega t) pairs].
struct InputLayout {
  std::size_t n = 0;
  std::size_t p = 0;
  std::size_t nw = 0;
  bool raw_time = true;
  std::vector<double> omegas;

  std::size_t size() const { return n + p + nw + (raw_time ? 1 : 0) + 2 * omegas.size(); }
  std::vector<std::string> names() const;

  template <class T>
  VecX<T> assemble(const VecX<T>& x, const VecX<T>& u, const VecX<T>& w, const T& t) const {
    using std::cos;
    using std::sin;
    VecX<T> z(static_cast<Eigen::Index>(size()));
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) z[c++] = x[i];
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(p); ++i) z[c++] = u[i];
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(nw); ++i) z[c++] = w[i];
    if (raw_time) z[c++] = t;
    for (double om : omegas) {
      z[c++] = sin(om * t);
      z[c++] = cos(om * t);
    }
    return z;
  }
};

class OdeNetwork {
 public:
  struct Layer {
    std::size_t neurons = 1;
    std::size_t branches = 1;
  };

  template <class T>
  struct Eval {
    VecX<T> out;  // one entry per output dimension
    VecX<T> o;    // [1, last layer outputs]
    VecX<T> num;  // o . w3 per output
    VecX<T> den;  // o . w4 per output
  };

  OdeNetwork() = default;
  OdeNetwork(OperatorSet ops, InputLayout inputs, std::size_t outputs, std::vector<Layer> layers,
             double delta = 1e-3);

  // W1, W2, w3 ~ U(-scale, scale); w4 = [1, 0, ..., 0] so training starts
  // with a unit denominator.
  void init_random(Rng& rng, double scale = 0.1);

  const OperatorSet& ops() const { return ops_; }
  const InputLayout& inputs() const { return inputs_; }
  std::size_t outputs() const { return outputs_; }
  const std::vector<Layer>& layers() const { return layers_; }
  double delta() const { return delta_; }
  void set_delta(double d);

  std::size_t num_params() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  // 1 marks a weight that must not be changed by training.
  std::vector<std::uint8_t>& frozen() { return frozen_; }
  const std::vector<std::uint8_t>& frozen() const { return frozen_; }

  // Width of the input seen by neurons of layer l (without the bias).
  std::size_t layer_input_dim(std::size_t l) const;
  std::size_t w1_offset(std::size_t layer, std::size_t neuron) const;
  std::size_t w2_offset(std::size_t layer, std::size_t neuron) const;
  std::size_t w1_index(std::size_t layer, std::size_t neuron, std::size_t i, std::size_t k, std::size_t l) const;
  std::size_t w2_index(std::size_t layer, std::size_t neuron, std::size_t i, std::size_t k) const;
  std::size_t w3_index(std::size_t out, std::size_t j) const;
  std::size_t w4_index(std::size_t out, std::size_t j) const;
  // Indices of all W1/W2 weights of one neuron.
  std::vector<std::size_t> neuron_indices(std::size_t layer, std::size_t neuron) const;

  template <class T>
  Eval<T> evaluate(std::span<const T> p, const VecX<T>& z_in) const;

  template <class T>
  VecX<T> forward(std::span<const T> p, const VecX<T>& x, const VecX<T>& u, const VecX<T>& w, const T& t) const {
    return evaluate<T>(p, inputs_.assemble<T>(x, u, w, t)).out;
  }
  Eigen::VectorXd forward(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                          double t) const {
    return forward<double>(std::span<const double>(params_), x, u, w, t);
  }

 private:
  void layout();

  OperatorSet ops_;
  InputLayout inputs_;
  std::size_t outputs_ = 0;
  std::vector<Layer> layers_;
  double delta_ = 1e-3;
  std::vector<double> params_;
  std::vector<std::uint8_t> frozen_;
  std::vector<std::vector<std::size_t>> neuron_offset_;  // start of W1 per neuron
  std::size_t head_offset_ = 0;                          // start of w3
};

template <class T>
OdeNetwork::Eval<T> OdeNetwork::evaluate(std::span<const T> p, const VecX<T>& z_in) const {
  if (p.size() != params_.size()) throw ConfigError("ODE network: parameter vector has the wrong size");
  if (static_cast<std::size_t>(z_in.size()) != inputs_.size()) throw ConfigError("ODE network: input has the wrong size");
  const std::size_t K = ops_.size();
  VecX<T> z(z_in.size() + 1);
  z[0] = T(1.0);
  z.tail(z_in.size()) = z_in;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::size_t L = static_cast<std::size_t>(z.size());
    VecX<T> next(static_cast<Eigen::Index>(layer.neurons) + 1);
    next[0] = T(1.0);
    for (std::size_t j = 0; j < layer.neurons; ++j) {
      const std::size_t a = neuron_offset_[l][j];
      const std::size_t n1 = layer.branches * K * L, n2 = layer.branches * (K + 1);
      next[static_cast<Eigen::Index>(j) + 1] =
          neuron_forward<T>(p.subspan(a, n1), p.subspan(a + n1, n2), layer.branches, ops_, z);
    }
    z = std::move(next);
  }
  Eval<T> e;
  const auto N = z.size();
  e.o = z;
  e.out.resize(static_cast<Eigen::Index>(outputs_));
  e.num.resize(static_cast<Eigen::Index>(outputs_));
  e.den.resize(static_cast<Eigen::Index>(outputs_));
  for (std::size_t m = 0; m < outputs_; ++m) {
    T num = p[w3_index(m, 0)], den = p[w4_index(m, 0)];
    for (Eigen::Index j = 1; j < N; ++j) {
      num += z[j] * p[w3_index(m, static_cast<std::size_t>(j))];
      den += z[j] * p[w4_index(m, static_cast<std::size_t>(j))];
    }
    const auto mi = static_cast<Eigen::Index>(m);
    e.num[mi] = num;
    e.den[mi] = den;
    e.out[mi] = ad::value_of(den) > delta_ ? T(num / den) : T(0.0);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Regularizers
// ---------------------------------------------------------------------------

struct R0Params {
  double a1 = 1.0, a2 = 10.0, a3 = 5.0, a4 = 0.01;
};

template <class T>
T reg_r0(const T& w, const R0Params& a) {
  using std::exp;
  const T aw = ad::abs_smooth(w);
  return a.a1 / (1.0 + exp(-a.a2 * aw + a.a3)) + a.a4 * aw;
}

template <class T>
T reg_r1(const VecX<T>& o, const VecX<T>& w4, double delta) {
  return ad::max_smooth(T(delta) - o.dot(w4));
}

// ---------------------------------------------------------------------------
// Prior knowledge
// ---------------------------------------------------------------------------

enum class Situation { ParametersOnly, Partial, Unknown };
Situation parse_situation(const std::string& s);
std::string situation_name(Situation s);

// `term` is a product of factors over the input names x1.., u1.., w1.., t:
//   factor := number | name | name^2 | name^3 | op(affine) | (affine)^k
//   affine := [c*]name {+|- [c*]name | c}
// e.g. "x1^3", "cos(0.7*t)", "sqrt(x1)", "x1*sin(x3)".
struct KnownTerm {
  std::size_t target = 0;  // output (state derivative) index, 0-based
  std::string term;
  double coefficient = 1.0;
  bool frozen = false;
};

struct PriorKnowledge {
  Situation situation = Situation::Unknown;
  std::vector<KnownTerm> terms;
};

// Sets the weights so the network evaluates exactly to the sum of the known
// terms (one neuron per term, denominator 1). Requires a single layer.
// Unused neurons keep their weights but do not reach the outputs. Frozen
// terms freeze their neuron and coefficient; ParametersOnly additionally
// freezes every weight except the coefficients of non-frozen terms.
// Throws CapacityError naming the first term that does not fit.
OdeNetwork precondition(OdeNetwork net, const PriorKnowledge& prior);

// ---------------------------------------------------------------------------
// Symbolic extraction
// ---------------------------------------------------------------------------

struct Expr {
  enum class Kind { Const, Input, Sum, Product, Quotient, Apply };
  Kind kind = Kind::Const;
  double value = 0.0;     // Const
  std::size_t index = 0;  // Input (0-based into the network input vector)
  OpKind op = OpKind::Identity;
  double delta = 0.0;  // Quotient guard
  std::vector<Expr> args;

  static Expr constant(double v);
  static Expr input(std::size_t i);

  bool is_const() const { return kind == Kind::Const; }
  double eval(const Eigen::VectorXd& z) const;
  std::string str(const std::vector<std::string>& names) const;
};

// Zeroes weights with |w| < prune_tol and folds the network into one
// expression per output over the network inputs.
std::vector<Expr> extract_expression(const OdeNetwork& net, double prune_tol);
OdeNetwork pruned(const OdeNetwork& net, double prune_tol);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

nlohmann::json to_json(const OdeNetwork& net);
OdeNetwork network_from_json(const nlohmann::json& j);
void save_network(const std::filesystem::path& path, const OdeNetwork& net);
OdeNetwork load_network(const std::filesystem::path& path);

}  // namespace odelearn::eqlnet
