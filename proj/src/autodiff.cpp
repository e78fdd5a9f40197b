#include "odelearn/autodiff.hpp"

#include <algorithm>
#include <sstream>

namespace odelearn::ad {

// A node whose parent slot is kNoParent stores the constant operand value in
// the matching partial slot (da for a, db for b). The reverse sweeps never read
// the partial of a missing parent, so the slot is free.

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sqrt: return "sqrt";
    case Op::PowInt: return "pow-integer";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::AbsSmooth: return "abs-smooth";
    case Op::MaxSmooth: return "max-smooth";
  }
  return "?";
}

namespace {

std::string domain_message(Op op, NodeId node, double arg) {
  std::ostringstream os;
  os << "domain error in op '" << op_name(op) << "' at node ";
  if (node == kNoParent)
    os << "<constant>";
  else
    os << node;
  os << " (argument " << arg << ")";
  return os.str();
}

Tape* common_tape(const Var& a, const Var& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta && tb && ta != tb) throw std::logic_error("autodiff: operands recorded on different tapes");
  return ta ? ta : tb;
}

NodeId pending_id(const Var& a) {
  return a.tape() ? static_cast<NodeId>(a.tape()->size()) : kNoParent;
}

double apply_unary(Op op, double x, std::int32_t k, NodeId id) {
  switch (op) {
    case Op::Neg: return -x;
    case Op::Sin: return std::sin(x);
    case Op::Cos: return std::cos(x);
    case Op::Sqrt:
      if (x < 0.0) throw DomainError(op, id, x);
      return std::sqrt(x);
    case Op::PowInt:
      if (k < 0 && x == 0.0) throw DomainError(op, id, x);
      return std::pow(x, k);
    case Op::Exp: return std::exp(x);
    case Op::Log:
      if (x <= 0.0) throw DomainError(op, id, x);
      return std::log(x);
    case Op::Tanh: return std::tanh(x);
    case Op::AbsSmooth: return abs_smooth(x);
    case Op::MaxSmooth: return max_smooth(x);
    default: break;
  }
  throw std::logic_error("autodiff: not a unary op");
}

double apply_binary(Op op, double x, double y, NodeId id) {
  switch (op) {
    case Op::Add: return x + y;
    case Op::Sub: return x - y;
    case Op::Mul: return x * y;
    case Op::Div:
      if (y == 0.0) throw DomainError(op, id, y);
      return x / y;
    default: break;
  }
  throw std::logic_error("autodiff: not a binary op");
}

bool is_binary(Op op) { return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div; }

}  // namespace

DomainError::DomainError(Op op, NodeId node, double argument)
    : std::domain_error(domain_message(op, node, argument)), op_(op), node_(node) {}

Var Tape::input(double value) {
  Node n;
  n.value = value;
  n.op = Op::Input;
  nodes_.push_back(n);
  return Var(this, static_cast<NodeId>(nodes_.size() - 1), value);
}

Var Tape::constant(double value) {
  Node n;
  n.value = value;
  n.op = Op::Constant;
  nodes_.push_back(n);
  return Var(this, static_cast<NodeId>(nodes_.size() - 1), value);
}

std::vector<Var> Tape::inputs(std::span<const double> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(input(v));
  return out;
}

void Tape::check_owned(const Var& v) const {
  if (v.tape() && v.tape() != this) throw std::logic_error("autodiff: variable belongs to another tape");
  if (v.tape() && v.id() >= nodes_.size()) throw std::logic_error("autodiff: stale variable (tape cleared?)");
}

Var Tape::record(Op op, Var a, Var b, double value, double da, double db, std::int32_t k) {
  check_owned(a);
  check_owned(b);
  Node n;
  n.value = value;
  n.op = op;
  n.k = k;
  n.a = a.is_constant() ? kNoParent : a.id();
  n.b = b.is_constant() ? kNoParent : b.id();
  n.da = a.is_constant() ? a.value() : da;
  n.db = b.is_constant() ? b.value() : db;
  // A binary op whose a-operand is constant still needs a's partial for the
  // sweep of b: nothing to do, the b slot carries it. For Mul the a-slot must
  // carry the partial w.r.t. a when a is on tape and b is constant.
  if (op == Op::Mul && !a.is_constant() && b.is_constant()) n.da = b.value();
  if (op == Op::Div && !a.is_constant() && b.is_constant()) n.da = 1.0 / b.value();
  nodes_.push_back(n);
  return Var(this, static_cast<NodeId>(nodes_.size() - 1), value);
}

NodeId Tape::ensure_on_tape(const Var& v) {
  if (v.is_constant()) return constant(v.value()).id();
  check_owned(v);
  return v.id();
}

NodeId Tape::lowest_wrt(std::span<const Var> wrt) const {
  NodeId lo = kNoParent;
  for (const Var& w : wrt) {
    if (w.is_constant()) continue;
    check_owned(w);
    lo = std::min(lo, w.id());
  }
  return lo;
}

double Tape::forward(Var output, std::span<const std::pair<Var, double>> bindings) const {
  if (output.is_constant()) return output.value();
  check_owned(output);
  const NodeId top = output.id();
  std::vector<double> vals(top + 1);
  std::vector<char> bound(top + 1, 0);
  for (const auto& [var, value] : bindings) {
    if (var.is_constant()) continue;
    check_owned(var);
    if (nodes_[var.id()].op != Op::Input)
      throw std::invalid_argument("autodiff::forward: bindings must name input nodes");
    if (var.id() <= top) {
      vals[var.id()] = value;
      bound[var.id()] = 1;
    }
  }
  for (NodeId id = 0; id <= top; ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::Input) {
      if (!bound[id]) vals[id] = n.value;
      continue;
    }
    if (n.op == Op::Constant) {
      vals[id] = n.value;
      continue;
    }
    const double x = n.a != kNoParent ? vals[n.a] : n.da;
    if (is_binary(n.op)) {
      const double y = n.b != kNoParent ? vals[n.b] : n.db;
      vals[id] = apply_binary(n.op, x, y, id);
    } else {
      vals[id] = apply_unary(n.op, x, n.k, id);
    }
  }
  return vals[top];
}

void Tape::accumulate_gradient(Var output, std::span<const Var> wrt, double scale,
                               std::span<double> accum) const {
  if (accum.size() != wrt.size()) throw std::invalid_argument("autodiff: gradient buffer size mismatch");
  if (output.is_constant()) return;
  check_owned(output);
  const NodeId lo = lowest_wrt(wrt);
  if (lo == kNoParent || lo > output.id()) return;
  const NodeId top = output.id();
  adjoint_.assign(top - lo + 1, 0.0);
  adjoint_[top - lo] = scale;
  for (NodeId id = top + 1; id-- > lo;) {
    const double g = adjoint_[id - lo];
    if (g == 0.0) continue;
    const Node& n = nodes_[id];
    if (n.op == Op::Input || n.op == Op::Constant) continue;
    if (n.a != kNoParent && n.a >= lo) adjoint_[n.a - lo] += g * n.da;
    if (n.b != kNoParent && n.b >= lo) adjoint_[n.b - lo] += g * n.db;
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Var& w = wrt[i];
    if (w.is_constant() || w.id() > top) continue;
    accum[i] += adjoint_[w.id() - lo];
  }
}

Gradient Tape::gradient(Var output, std::span<const Var> wrt) const {
  Gradient g;
  g.values.assign(wrt.size(), 0.0);
  g.wrt.reserve(wrt.size());
  for (const Var& w : wrt) g.wrt.push_back(w.is_constant() ? kNoParent : w.id());
  accumulate_gradient(output, wrt, 1.0, g.values);
  return g;
}

std::vector<Var> Tape::gradient_graph(Var output, std::span<const Var> wrt) {
  std::vector<Var> result(wrt.size(), Var(0.0));
  if (output.is_constant()) return result;
  check_owned(output);
  const NodeId lo = lowest_wrt(wrt);
  if (lo == kNoParent || lo > output.id()) return result;
  const NodeId top = output.id();
  std::vector<Var> adj(top - lo + 1, Var(0.0));
  std::vector<char> has(top - lo + 1, 0);
  adj[top - lo] = Var(1.0);
  has[top - lo] = 1;

  auto push = [&](NodeId parent, const Var& contribution) {
    if (parent == kNoParent || parent < lo) return;
    const std::size_t slot = parent - lo;
    if (has[slot]) {
      adj[slot] = adj[slot] + contribution;
    } else {
      adj[slot] = contribution;
      has[slot] = 1;
    }
  };

  for (NodeId id = top + 1; id-- > lo;) {
    if (!has[id - lo]) continue;
    const Var g = adj[id - lo];
    const Node n = nodes_[id];  // copy: recording below may reallocate nodes_
    if (n.op == Op::Input || n.op == Op::Constant) continue;
    const Var self(this, id, n.value);
    const Var A = n.a != kNoParent ? Var(this, n.a, nodes_[n.a].value) : Var(n.da);
    const Var B = n.b != kNoParent ? Var(this, n.b, nodes_[n.b].value) : Var(n.db);
    const bool use_a = n.a != kNoParent && n.a >= lo;
    const bool use_b = n.b != kNoParent && n.b >= lo;
    switch (n.op) {
      case Op::Add:
        if (use_a) push(n.a, g);
        if (use_b) push(n.b, g);
        break;
      case Op::Sub:
        if (use_a) push(n.a, g);
        if (use_b) push(n.b, -g);
        break;
      case Op::Mul:
        if (use_a) push(n.a, g * B);
        if (use_b) push(n.b, g * A);
        break;
      case Op::Div:
        if (use_a) push(n.a, g / B);
        if (use_b) push(n.b, -(g * self / B));
        break;
      case Op::Neg:
        if (use_a) push(n.a, -g);
        break;
      case Op::Sin:
        if (use_a) push(n.a, g * cos(A));
        break;
      case Op::Cos:
        if (use_a) push(n.a, -(g * sin(A)));
        break;
      case Op::Sqrt:
        if (use_a) push(n.a, g * 0.5 / self);
        break;
      case Op::PowInt:
        if (use_a) push(n.a, g * static_cast<double>(n.k) * pow(A, n.k - 1));
        break;
      case Op::Exp:
        if (use_a) push(n.a, g * self);
        break;
      case Op::Log:
        if (use_a) push(n.a, g / A);
        break;
      case Op::Tanh:
        if (use_a) push(n.a, g * (1.0 - self * self));
        break;
      case Op::AbsSmooth:
        if (use_a) push(n.a, g * A / self);
        break;
      case Op::MaxSmooth:
        if (use_a) push(n.a, g * 0.5 * (1.0 + A / abs_smooth(A)));
        break;
      default:
        break;
    }
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Var& w = wrt[i];
    if (w.is_constant() || w.id() > top) continue;
    if (has[w.id() - lo]) result[i] = adj[w.id() - lo];
  }
  return result;
}

Eigen::MatrixXd Tape::jacobian(std::span<const Var> outputs, std::span<const Var> wrt) const {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(outputs.size()),
                                            static_cast<Eigen::Index>(wrt.size()));
  std::vector<double> row(wrt.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    accumulate_gradient(outputs[i], wrt, 1.0, row);
    for (std::size_t j = 0; j < wrt.size(); ++j) J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return J;
}

Eigen::Matrix<Var, Eigen::Dynamic, Eigen::Dynamic> Tape::jacobian_graph(std::span<const Var> outputs,
                                                                        std::span<const Var> wrt) {
  Eigen::Matrix<Var, Eigen::Dynamic, Eigen::Dynamic> J(static_cast<Eigen::Index>(outputs.size()),
                                                       static_cast<Eigen::Index>(wrt.size()));
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    auto row = gradient_graph(outputs[i], wrt);
    for (std::size_t j = 0; j < wrt.size(); ++j) J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return J;
}

// --- operators -------------------------------------------------------------

Var operator+(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Var(a.value() + b.value());
  if (a.is_constant() && a.value() == 0.0) return b;
  if (b.is_constant() && b.value() == 0.0) return a;
  return t->record(Op::Add, a, b, a.value() + b.value(), 1.0, 1.0);
}

Var operator-(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Var(a.value() - b.value());
  if (b.is_constant() && b.value() == 0.0) return a;
  return t->record(Op::Sub, a, b, a.value() - b.value(), 1.0, -1.0);
}

Var operator*(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Var(a.value() * b.value());
  if (a.is_constant()) {
    if (a.value() == 1.0) return b;
    if (a.value() == 0.0) return Var(0.0);
  }
  if (b.is_constant()) {
    if (b.value() == 1.0) return a;
    if (b.value() == 0.0) return Var(0.0);
  }
  return t->record(Op::Mul, a, b, a.value() * b.value(), b.value(), a.value());
}

Var operator/(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  if (b.value() == 0.0) throw DomainError(Op::Div, t ? static_cast<NodeId>(t->size()) : kNoParent, 0.0);
  if (!t) return Var(a.value() / b.value());
  if (b.is_constant() && b.value() == 1.0) return a;
  if (a.is_constant() && a.value() == 0.0) return Var(0.0);
  const double y = a.value() / b.value();
  return t->record(Op::Div, a, b, y, 1.0 / b.value(), -y / b.value());
}

Var operator-(const Var& a) {
  if (a.is_constant()) return Var(-a.value());
  return a.tape()->record(Op::Neg, a, Var(), -a.value(), -1.0, 0.0);
}

namespace {
template <class F>
Var unary(Op op, const Var& a, double y, F&& partial, std::int32_t k = 0) {
  if (a.is_constant()) return Var(y);
  return a.tape()->record(op, a, Var(), y, partial(), 0.0, k);
}
}  // namespace

Var sin(const Var& a) {
  return unary(Op::Sin, a, std::sin(a.value()), [&] { return std::cos(a.value()); });
}

Var cos(const Var& a) {
  return unary(Op::Cos, a, std::cos(a.value()), [&] { return -std::sin(a.value()); });
}

Var sqrt(const Var& a) {
  const double y = apply_unary(Op::Sqrt, a.value(), 0, pending_id(a));
  return unary(Op::Sqrt, a, y, [&] { return 0.5 / y; });
}

Var exp(const Var& a) {
  const double y = std::exp(a.value());
  return unary(Op::Exp, a, y, [&] { return y; });
}

Var log(const Var& a) {
  const double y = apply_unary(Op::Log, a.value(), 0, pending_id(a));
  return unary(Op::Log, a, y, [&] { return 1.0 / a.value(); });
}

Var tanh(const Var& a) {
  const double y = std::tanh(a.value());
  return unary(Op::Tanh, a, y, [&] { return 1.0 - y * y; });
}

Var pow(const Var& a, int k) {
  if (k == 0) return Var(1.0);
  if (k == 1) return a;
  const double y = apply_unary(Op::PowInt, a.value(), k, pending_id(a));
  return unary(Op::PowInt, a, y, [&] { return static_cast<double>(k) * std::pow(a.value(), k - 1); }, k);
}

Var abs_smooth(const Var& a) {
  const double y = abs_smooth(a.value());
  return unary(Op::AbsSmooth, a, y, [&] { return a.value() / y; });
}

Var max_smooth(const Var& a) {
  const double s = abs_smooth(a.value());
  const double y = 0.5 * (a.value() + s);
  return unary(Op::MaxSmooth, a, y, [&] { return 0.5 * (1.0 + a.value() / s); });
}

}  // namespace odelearn::ad
