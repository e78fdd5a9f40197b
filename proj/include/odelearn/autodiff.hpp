// Reverse-mode automatic differentiation on a define-by-run scalar tape.
//
// Every arithmetic operation on tape-backed `Var`s appends a node holding the
// forward value and the local partials with respect to its (at most two)
// parents. `Tape::gradient` performs a plain reverse sweep with doubles.
// `Tape::gradient_graph` performs the reverse sweep with `Var` adjoints so the
// resulting derivatives are themselves differentiable; this is what allows a
// loss containing d(xi)/dt to be differentiated with respect to the network
// weights that produce xi.
//
// A `Var` without a tape is a plain constant. Mixing constants and tape values
// is free; mixing values from two different tapes is a logic error.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace odelearn::ad {

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Sin,
  Cos,
  Sqrt,
  PowInt,
  Exp,
  Log,
  Tanh,
  AbsSmooth,
  MaxSmooth,
};

const char* op_name(Op op);

// Smoothing constant of abs_smooth / max_smooth.
inline constexpr double kSmoothEps = 1e-8;

using NodeId = std::uint32_t;
inline constexpr NodeId kNoParent = 0xFFFFFFFFu;

class DomainError : public std::domain_error {
 public:
  DomainError(Op op, NodeId node, double argument);
  Op op() const { return op_; }
  NodeId node() const { return node_; }

 private:
  Op op_;
  NodeId node_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(double v) : value_(v) {}  // NOLINT: constants convert implicitly

  double value() const { return value_; }
  bool is_constant() const { return tape_ == nullptr; }
  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id, double v) : value_(v), tape_(tape), id_(id) {}

  double value_ = 0.0;
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

struct Node {
  double value = 0.0;
  double da = 0.0;  // d value / d parent a
  double db = 0.0;  // d value / d parent b
  NodeId a = kNoParent;
  NodeId b = kNoParent;
  Op op = Op::Constant;
  std::int32_t k = 0;  // integer exponent for PowInt
};

struct Gradient {
  std::vector<NodeId> wrt;
  std::vector<double> values;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(double value);
  Var constant(double value);
  std::vector<Var> inputs(std::span<const double> values);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  void reserve(std::size_t n) { nodes_.reserve(n); }
  // Invalidates every Var recorded on this tape.
  void clear() { nodes_.clear(); }

  // Re-evaluates the recorded graph below `output` with some inputs rebound.
  // Unbound inputs keep their recorded value. Throws DomainError when an op
  // leaves its domain.
  double forward(Var output, std::span<const std::pair<Var, double>> bindings) const;

  // Plain reverse sweep. Inputs not reachable from `output` receive 0.
  Gradient gradient(Var output, std::span<const Var> wrt) const;
  // Accumulates d output / d wrt[i] * scale into `accum[i]`.
  void accumulate_gradient(Var output, std::span<const Var> wrt, double scale,
                           std::span<double> accum) const;

  // Reverse sweep that records the adjoint computation on this tape. The
  // returned Vars can be differentiated again.
  std::vector<Var> gradient_graph(Var output, std::span<const Var> wrt);

  Eigen::MatrixXd jacobian(std::span<const Var> outputs, std::span<const Var> wrt) const;
  Eigen::Matrix<Var, Eigen::Dynamic, Eigen::Dynamic> jacobian_graph(std::span<const Var> outputs,
                                                                    std::span<const Var> wrt);

  // Internal: append an op node. Used by the free operator overloads.
  Var record(Op op, Var a, Var b, double value, double da, double db, std::int32_t k = 0);

 private:
  NodeId ensure_on_tape(const Var& v);
  void check_owned(const Var& v) const;
  NodeId lowest_wrt(std::span<const Var> wrt) const;

  std::vector<Node> nodes_;
  mutable std::vector<double> adjoint_;
};

// Arithmetic.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
inline Var operator+(const Var& a) { return a; }
inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

// Comparisons look at values only; they are not differentiable.
inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }
inline bool operator==(const Var& a, const Var& b) { return a.value() == b.value(); }
inline bool operator!=(const Var& a, const Var& b) { return a.value() != b.value(); }

Var sin(const Var& a);
Var cos(const Var& a);
Var sqrt(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var pow(const Var& a, int k);
// sqrt(a^2 + eps^2)
Var abs_smooth(const Var& a);
// (a + sqrt(a^2 + eps^2)) / 2, a smooth max(0, a)
Var max_smooth(const Var& a);
inline Var square(const Var& a) { return a * a; }

inline double abs_smooth(double a) { return std::sqrt(a * a + kSmoothEps * kSmoothEps); }
inline double max_smooth(double a) { return 0.5 * (a + abs_smooth(a)); }
inline double square(double a) { return a * a; }

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

}  // namespace odelearn::ad

namespace Eigen {
template <>
struct NumTraits<odelearn::ad::Var> : NumTraits<double> {
  using Real = odelearn::ad::Var;
  using NonInteger = odelearn::ad::Var;
  using Nested = odelearn::ad::Var;
  using Literal = odelearn::ad::Var;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 4,
    MulCost = 4,
  };
};
}  // namespace Eigen

namespace odelearn {
using ad::Var;

template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
using VecV = VecX<Var>;
using MatV = MatX<Var>;

template <class T>
VecX<double> values_of(const VecX<T>& v) {
  VecX<double> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = ad::value_of(v[i]);
  return out;
}

template <class T>
MatX<double> values_of(const MatX<T>& m) {
  MatX<double> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = ad::value_of(m(i, j));
  return out;
}
}  // namespace odelearn
