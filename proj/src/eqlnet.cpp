#include "odelearn/eqlnet.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "odelearn/dynamics.hpp"

namespace odelearn::eqlnet {

// --- operators -------------------------------------------------------------

std::string op_name(OpKind op) {
  switch (op) {
    case OpKind::Identity: return "identity";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::Square: return "square";
    case OpKind::Cube: return "cube";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Exp: return "exp";
    case OpKind::Tanh: return "tanh";
  }
  return "?";
}

OpKind parse_op(const std::string& name) {
  for (OpKind op : {OpKind::Identity, OpKind::Sin, OpKind::Cos, OpKind::Square, OpKind::Cube, OpKind::Sqrt,
                    OpKind::Exp, OpKind::Tanh})
    if (op_name(op) == name) return op;
  if (name == "id") return OpKind::Identity;
  throw ConfigError("unknown operator '" + name + "'");
}

OperatorSet::OperatorSet(std::vector<OpKind> o) : ops(std::move(o)) {
  if (ops.empty()) throw ConfigError("operator set must not be empty");
  for (std::size_t i = 0; i < ops.size(); ++i)
    for (std::size_t j = i + 1; j < ops.size(); ++j)
      if (ops[i] == ops[j]) throw ConfigError("operator '" + op_name(ops[i]) + "' listed twice");
}

OperatorSet OperatorSet::parse(const std::string& list) {
  std::vector<OpKind> ops;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
    if (!item.empty()) ops.push_back(parse_op(item));
  }
  return OperatorSet(std::move(ops));
}

std::optional<std::size_t> OperatorSet::index_of(OpKind op) const {
  for (std::size_t i = 0; i < ops.size(); ++i)
    if (ops[i] == op) return i;
  return std::nullopt;
}

std::vector<std::string> OperatorSet::names() const {
  std::vector<std::string> out;
  for (OpKind op : ops) out.push_back(op_name(op));
  return out;
}

std::vector<std::string> InputLayout::names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("x" + std::to_string(i + 1));
  for (std::size_t i = 0; i < p; ++i) out.push_back("u" + std::to_string(i + 1));
  for (std::size_t i = 0; i < nw; ++i) out.push_back("w" + std::to_string(i + 1));
  if (raw_time) out.push_back("t");
  for (double om : omegas) {
    const auto s = dynamics::format_double(om);
    out.push_back("sin(" + s + "*t)");
    out.push_back("cos(" + s + "*t)");
  }
  return out;
}

// --- network ----------------------------------------------------------------

OdeNetwork::OdeNetwork(OperatorSet ops, InputLayout inputs, std::size_t outputs, std::vector<Layer> layers,
                       double delta)
    : ops_(std::move(ops)), inputs_(std::move(inputs)), outputs_(outputs), layers_(std::move(layers)) {
  if (ops_.size() == 0) throw ConfigError("ODE network needs at least one operator");
  if (layers_.empty()) throw ConfigError("ODE network needs at least one layer");
  if (outputs_ == 0) throw ConfigError("ODE network needs at least one output");
  for (const auto& l : layers_)
    if (l.neurons == 0 || l.branches == 0) throw ConfigError("ODE network layers need neurons and branches");
  set_delta(delta);
  layout();
}

void OdeNetwork::set_delta(double d) {
  if (!(d > 0.0)) throw ConfigError("ODE network delta must be positive");
  delta_ = d;
}

void OdeNetwork::layout() {
  const std::size_t K = ops_.size();
  std::size_t off = 0;
  neuron_offset_.assign(layers_.size(), {});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::size_t L = layer_input_dim(l) + 1;
    for (std::size_t j = 0; j < layers_[l].neurons; ++j) {
      neuron_offset_[l].push_back(off);
      off += layers_[l].branches * K * L + layers_[l].branches * (K + 1);
    }
  }
  head_offset_ = off;
  off += 2 * outputs_ * (layers_.back().neurons + 1);
  params_.assign(off, 0.0);
  frozen_.assign(off, 0);
  for (std::size_t m = 0; m < outputs_; ++m) params_[w4_index(m, 0)] = 1.0;
}

std::size_t OdeNetwork::layer_input_dim(std::size_t l) const {
  return l == 0 ? inputs_.size() : layers_[l - 1].neurons;
}

std::size_t OdeNetwork::w1_offset(std::size_t layer, std::size_t neuron) const {
  return neuron_offset_.at(layer).at(neuron);
}

std::size_t OdeNetwork::w2_offset(std::size_t layer, std::size_t neuron) const {
  return w1_offset(layer, neuron) + layers_[layer].branches * ops_.size() * (layer_input_dim(layer) + 1);
}

std::size_t OdeNetwork::w1_index(std::size_t layer, std::size_t neuron, std::size_t i, std::size_t k,
                                 std::size_t l) const {
  return w1_offset(layer, neuron) + (i * ops_.size() + k) * (layer_input_dim(layer) + 1) + l;
}

std::size_t OdeNetwork::w2_index(std::size_t layer, std::size_t neuron, std::size_t i, std::size_t k) const {
  return w2_offset(layer, neuron) + i * (ops_.size() + 1) + k;
}

std::size_t OdeNetwork::w3_index(std::size_t out, std::size_t j) const {
  return head_offset_ + out * (layers_.back().neurons + 1) + j;
}

std::size_t OdeNetwork::w4_index(std::size_t out, std::size_t j) const {
  return head_offset_ + (outputs_ + out) * (layers_.back().neurons + 1) + j;
}

std::vector<std::size_t> OdeNetwork::neuron_indices(std::size_t layer, std::size_t neuron) const {
  const std::size_t a = w1_offset(layer, neuron);
  const std::size_t b = w2_offset(layer, neuron) + layers_[layer].branches * (ops_.size() + 1);
  std::vector<std::size_t> out(b - a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a + i;
  return out;
}

void OdeNetwork::init_random(Rng& rng, double scale) {
  for (std::size_t i = 0; i < head_offset_; ++i) params_[i] = rng.uniform(-scale, scale);
  const std::size_t N = layers_.back().neurons + 1;
  for (std::size_t m = 0; m < outputs_; ++m) {
    for (std::size_t j = 0; j < N; ++j) {
      params_[w3_index(m, j)] = rng.uniform(-scale, scale);
      params_[w4_index(m, j)] = j == 0 ? 1.0 : 0.0;
    }
  }
}

// --- prior knowledge ----------------------------------------------------------

Situation parse_situation(const std::string& s) {
  if (s == "parameters" || s == "parameters-only" || s == "i") return Situation::ParametersOnly;
  if (s == "partial" || s == "ii") return Situation::Partial;
  if (s == "unknown" || s == "iii") return Situation::Unknown;
  throw ConfigError("unknown situation '" + s + "'");
}

std::string situation_name(Situation s) {
  switch (s) {
    case Situation::ParametersOnly: return "parameters";
    case Situation::Partial: return "partial";
    case Situation::Unknown: return "unknown";
  }
  return "unknown";
}

namespace {

struct Factor {
  OpKind op = OpKind::Identity;
  Eigen::VectorXd w;  // over [1, network inputs]
};

struct ParsedTerm {
  double scale = 1.0;
  std::vector<Factor> factors;
};

// Recursive-descent parser for the term grammar documented in the header.
class TermParser {
 public:
  TermParser(const std::string& text, const OdeNetwork& net)
      : text_(text), net_(net), names_(net.inputs().names()), width_(net.inputs().size() + 1) {}

  ParsedTerm parse() {
    ParsedTerm t;
    skip();
    if (peek() == '-') {
      ++pos_;
      t.scale = -1.0;
    }
    factor(t);
    skip();
    while (peek() == '*') {
      ++pos_;
      factor(t);
      skip();
    }
    if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
    return t;
  }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw CapacityError("term '" + text_ + "': " + why);
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  void skip() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool at_number() const {
    const char c = peek();
    return std::isdigit(static_cast<unsigned char>(c)) || c == '.';
  }
  double number() {
    std::size_t used = 0;
    const double v = std::stod(text_.substr(pos_), &used);
    pos_ += used;
    return v;
  }
  std::string ident() {
    std::size_t b = pos_;
    while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) ++pos_;
    return text_.substr(b, pos_ - b);
  }

  std::size_t var_index(const std::string& name) const {
    // raw input names; the feature columns are matched separately
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i + 1;
    fail("unknown variable '" + name + "'");
  }

  std::optional<OpKind> op_for(const std::string& name) const {
    for (OpKind op : {OpKind::Sin, OpKind::Cos, OpKind::Square, OpKind::Cube, OpKind::Sqrt, OpKind::Exp,
                      OpKind::Tanh, OpKind::Identity})
      if (op_name(op) == name) return op;
    return std::nullopt;
  }

  void require(OpKind op) const {
    if (!net_.ops().index_of(op)) fail("operator '" + op_name(op) + "' is not in the operator set");
  }

  Eigen::VectorXd unit(std::size_t idx) const {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width_));
    w[static_cast<Eigen::Index>(idx)] = 1.0;
    return w;
  }

  // affine := [-] aterm {(+|-) aterm}
  Eigen::VectorXd affine() {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width_));
    skip();
    double sign = 1.0;
    if (peek() == '-') {
      sign = -1.0;
      ++pos_;
    } else if (peek() == '+') {
      ++pos_;
    }
    while (true) {
      skip();
      double c = sign;
      bool variable = true;
      if (at_number()) {
        c *= number();
        skip();
        if (peek() == '*') {
          ++pos_;
          skip();
        } else {
          w[0] += c;
          variable = false;
        }
      }
      if (variable) {
        const std::string name = ident();
        if (name.empty()) fail("expected a variable or number");
        w[static_cast<Eigen::Index>(var_index(name))] += c;
      }
      skip();
      if (peek() == '+') {
        sign = 1.0;
      } else if (peek() == '-') {
        sign = -1.0;
      } else {
        return w;
      }
      ++pos_;
    }
  }

  int exponent() {
    skip();
    if (peek() != '^') return 1;
    ++pos_;
    skip();
    const double e = number();
    if (e != 1.0 && e != 2.0 && e != 3.0) fail("only exponents 1, 2 and 3 are supported");
    return static_cast<int>(e);
  }

  void power(ParsedTerm& t, const Eigen::VectorXd& w, int e) {
    if (e == 1) {
      require(OpKind::Identity);
      t.factors.push_back({OpKind::Identity, w});
    } else if (e == 2 && net_.ops().index_of(OpKind::Square)) {
      t.factors.push_back({OpKind::Square, w});
    } else if (e == 3 && net_.ops().index_of(OpKind::Cube)) {
      t.factors.push_back({OpKind::Cube, w});
    } else if (e == 3 && net_.ops().index_of(OpKind::Square)) {
      t.factors.push_back({OpKind::Square, w});
      power(t, w, 1);
    } else {
      for (int i = 0; i < e; ++i) power(t, w, 1);
    }
  }

  // A time feature column equal to op(c * t), if declared.
  std::optional<std::size_t> feature_for(OpKind op, const Eigen::VectorXd& w) const {
    if (op != OpKind::Sin && op != OpKind::Cos) return std::nullopt;
    const auto& in = net_.inputs();
    const std::size_t base = in.n + in.p + in.nw + (in.raw_time ? 1 : 0);
    // the argument must be c * t only
    std::optional<double> c;
    if (in.raw_time) {
      const auto ti = static_cast<Eigen::Index>(in.n + in.p + in.nw + 1);
      for (Eigen::Index i = 0; i < w.size(); ++i)
        if (i != ti && w[i] != 0.0) return std::nullopt;
      c = w[ti];
    } else {
      c = time_coef_;
      if (!c) return std::nullopt;
    }
    for (std::size_t k = 0; k < in.omegas.size(); ++k)
      if (std::abs(in.omegas[k] - *c) <= 1e-12 * std::max(1.0, std::abs(*c)))
        return base + 1 + 2 * k + (op == OpKind::Sin ? 0 : 1);
    return std::nullopt;
  }

  // Argument of an operator: an affine form, except that "c*t" is accepted
  // without a raw-time input when it matches a declared forcing frequency.
  Eigen::VectorXd op_argument() {
    time_coef_.reset();
    if (net_.inputs().raw_time) return affine();
    const std::size_t save = pos_;
    skip();
    double c = 1.0;
    if (at_number()) {
      c = number();
      skip();
      if (peek() == '*') {
        ++pos_;
        skip();
      } else {
        pos_ = save;
        return affine();
      }
    }
    if (ident() == "t") {
      skip();
      if (peek() == ')') {
        time_coef_ = c;
        return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width_));
      }
    }
    pos_ = save;
    return affine();
  }

  // factor := number | name[^k] | op(affine) | (affine)[^k]
  void factor(ParsedTerm& t) {
    skip();
    if (at_number()) {
      t.scale *= number();
      return;
    }
    if (peek() == '(') {
      ++pos_;
      const auto w = affine();
      expect(')');
      power(t, w, exponent());
      return;
    }
    const std::string name = ident();
    if (name.empty()) fail("expected a factor");
    skip();
    if (peek() == '(') {
      const auto op = op_for(name);
      if (!op) fail("unknown operator '" + name + "'");
      ++pos_;
      const auto w = op_argument();
      expect(')');
      if (auto f = feature_for(*op, w)) {
        require(OpKind::Identity);
        t.factors.push_back({OpKind::Identity, unit(*f)});
      } else {
        if (time_coef_) fail("no time feature with frequency " + dynamics::format_double(*time_coef_));
        require(*op);
        t.factors.push_back({*op, w});
      }
      const int e = exponent();
      if (e != 1) fail("exponents of operator applications are not supported");
      return;
    }
    power(t, unit(var_index(name)), exponent());
  }

  std::string text_;
  const OdeNetwork& net_;
  std::vector<std::string> names_;
  std::size_t width_;
  std::size_t pos_ = 0;
  std::optional<double> time_coef_;
};

}  // namespace

OdeNetwork precondition(OdeNetwork net, const PriorKnowledge& prior) {
  if (prior.terms.empty()) return net;
  if (net.layers().size() != 1)
    throw CapacityError("term '" + prior.terms.front().term + "': preconditioning needs a single-layer network");
  const auto& layer = net.layers().front();
  const std::size_t K = net.ops().size();
  const std::size_t L = net.layer_input_dim(0) + 1;
  auto& p = net.params();
  auto& frozen = net.frozen();

  std::vector<ParsedTerm> parsed;
  for (const auto& term : prior.terms) {
    if (term.target >= net.outputs())
      throw CapacityError("term '" + term.term + "': target state " + std::to_string(term.target + 1) + " does not exist");
    parsed.push_back(TermParser(term.term, net).parse());
    if (parsed.back().factors.size() > layer.branches)
      throw CapacityError("term '" + term.term + "' needs " + std::to_string(parsed.back().factors.size()) +
                          " multiplicative branches but neurons have " + std::to_string(layer.branches));
  }
  if (prior.terms.size() > layer.neurons)
    throw CapacityError("term '" + prior.terms[layer.neurons].term + "' does not fit: all " +
                        std::to_string(layer.neurons) + " neurons are used");

  // Heads: numerator only through the term neurons, denominator 1.
  const std::size_t N = layer.neurons + 1;
  for (std::size_t m = 0; m < net.outputs(); ++m)
    for (std::size_t j = 0; j < N; ++j) {
      p[net.w3_index(m, j)] = 0.0;
      p[net.w4_index(m, j)] = j == 0 ? 1.0 : 0.0;
    }

  for (std::size_t t = 0; t < parsed.size(); ++t) {
    const auto& term = prior.terms[t];
    const auto& pt = parsed[t];
    for (std::size_t idx : net.neuron_indices(0, t)) p[idx] = 0.0;
    for (std::size_t i = 0; i < layer.branches; ++i) {
      if (i < pt.factors.size()) {
        const auto& f = pt.factors[i];
        const std::size_t k = *net.ops().index_of(f.op);
        p[net.w2_index(0, t, i, k)] = 1.0;
        for (std::size_t l = 0; l < L; ++l) p[net.w1_index(0, t, i, k, l)] = f.w[static_cast<Eigen::Index>(l)];
      } else {
        p[net.w2_index(0, t, i, K)] = 1.0;  // neutral branch
      }
    }
    // a term made of numbers only is a constant branch
    if (pt.factors.empty()) p[net.w2_index(0, t, 0, K)] = 1.0;
    p[net.w3_index(term.target, t + 1)] = term.coefficient * pt.scale;
    if (term.frozen) {
      for (std::size_t idx : net.neuron_indices(0, t)) frozen[idx] = 1;
      frozen[net.w3_index(term.target, t + 1)] = 1;
    }
  }

  if (prior.situation == Situation::ParametersOnly) {
    std::vector<std::uint8_t> keep(p.size(), 0);
    for (std::size_t t = 0; t < prior.terms.size(); ++t)
      if (!prior.terms[t].frozen) keep[net.w3_index(prior.terms[t].target, t + 1)] = 1;
    for (std::size_t i = 0; i < p.size(); ++i) frozen[i] = keep[i] ? 0 : 1;
  }
  return net;
}

// --- expressions ----------------------------------------------------------------

Expr Expr::constant(double v) {
  Expr e;
  e.kind = Kind::Const;
  e.value = v;
  return e;
}

Expr Expr::input(std::size_t i) {
  Expr e;
  e.kind = Kind::Input;
  e.index = i;
  return e;
}

double Expr::eval(const Eigen::VectorXd& z) const {
  switch (kind) {
    case Kind::Const: return value;
    case Kind::Input: return z[static_cast<Eigen::Index>(index)];
    case Kind::Sum: {
      double s = 0.0;
      for (const auto& a : args) s += a.eval(z);
      return s;
    }
    case Kind::Product: {
      double s = 1.0;
      for (const auto& a : args) s *= a.eval(z);
      return s;
    }
    case Kind::Quotient: {
      const double den = args[1].eval(z);
      return den > delta ? args[0].eval(z) / den : 0.0;
    }
    case Kind::Apply: return apply_op(op, args[0].eval(z));
  }
  return 0.0;
}

namespace {

bool is_atomic(const Expr& e) {
  return e.kind == Expr::Kind::Input || e.kind == Expr::Kind::Apply ||
         (e.kind == Expr::Kind::Const && e.value >= 0.0);
}

std::string paren(const Expr& e, const std::vector<std::string>& names) {
  const std::string s = e.str(names);
  return is_atomic(e) ? s : "(" + s + ")";
}

}  // namespace

std::string Expr::str(const std::vector<std::string>& names) const {
  switch (kind) {
    case Kind::Const: return dynamics::format_double(value);
    case Kind::Input: return index < names.size() ? names[index] : "z" + std::to_string(index);
    case Kind::Sum: {
      std::string s;
      for (std::size_t i = 0; i < args.size(); ++i) {
        std::string a = args[i].str(names);
        if (i == 0) {
          s = a;
        } else if (!a.empty() && a[0] == '-') {
          s += " - " + a.substr(1);
        } else {
          s += " + " + a;
        }
      }
      return s;
    }
    case Kind::Product: {
      std::string s;
      for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (i == 0 && a.kind == Kind::Const) {
          if (a.value == -1.0 && args.size() > 1) {
            s = "-";
            continue;
          }
          s = dynamics::format_double(a.value);
        } else {
          if (!s.empty() && s != "-") s += "*";
          s += paren(a, names);
        }
      }
      return s;
    }
    case Kind::Quotient: return paren(args[0], names) + "/" + paren(args[1], names);
    case Kind::Apply: {
      const auto& a = args[0];
      switch (op) {
        case OpKind::Identity: return a.str(names);
        case OpKind::Square: return paren(a, names) + "^2";
        case OpKind::Cube: return paren(a, names) + "^3";
        default: return op_name(op) + "(" + a.str(names) + ")";
      }
    }
  }
  return "";
}

namespace {

Expr make_sum(std::vector<Expr> terms) {
  std::vector<Expr> flat;
  double c = 0.0;
  for (auto& t : terms) {
    if (t.kind == Expr::Kind::Sum) {
      for (auto& a : t.args) {
        if (a.is_const()) c += a.value;
        else flat.push_back(std::move(a));
      }
    } else if (t.is_const()) {
      c += t.value;
    } else {
      flat.push_back(std::move(t));
    }
  }
  if (c != 0.0) flat.push_back(Expr::constant(c));
  if (flat.empty()) return Expr::constant(0.0);
  if (flat.size() == 1) return std::move(flat.front());
  Expr e;
  e.kind = Expr::Kind::Sum;
  e.args = std::move(flat);
  return e;
}

Expr make_product(std::vector<Expr> factors) {
  std::vector<Expr> flat;
  double c = 1.0;
  for (auto& f : factors) {
    if (f.kind == Expr::Kind::Product) {
      for (auto& a : f.args) {
        if (a.is_const()) c *= a.value;
        else flat.push_back(std::move(a));
      }
    } else if (f.is_const()) {
      c *= f.value;
    } else {
      flat.push_back(std::move(f));
    }
  }
  if (c == 0.0) return Expr::constant(0.0);
  if (flat.empty()) return Expr::constant(c);
  if (c != 1.0) flat.insert(flat.begin(), Expr::constant(c));
  if (flat.size() == 1) return std::move(flat.front());
  Expr e;
  e.kind = Expr::Kind::Product;
  e.args = std::move(flat);
  return e;
}

Expr make_apply(OpKind op, Expr arg) {
  if (arg.is_const()) return Expr::constant(apply_op(op, arg.value));
  if (op == OpKind::Identity) return arg;
  Expr e;
  e.kind = Expr::Kind::Apply;
  e.op = op;
  e.args.push_back(std::move(arg));
  return e;
}

Expr scaled(double c, const Expr& e) { return make_product({Expr::constant(c), e}); }

}  // namespace

OdeNetwork pruned(const OdeNetwork& net, double prune_tol) {
  OdeNetwork out = net;
  for (double& w : out.params())
    if (std::abs(w) < prune_tol) w = 0.0;
  return out;
}

std::vector<Expr> extract_expression(const OdeNetwork& src, double prune_tol) {
  const OdeNetwork net = pruned(src, prune_tol);
  const auto& p = net.params();
  const std::size_t K = net.ops().size();
  std::vector<Expr> z;  // [1, inputs]
  z.push_back(Expr::constant(1.0));
  for (std::size_t i = 0; i < net.inputs().size(); ++i) z.push_back(Expr::input(i));

  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    std::vector<Expr> next;
    next.push_back(Expr::constant(1.0));
    for (std::size_t j = 0; j < layer.neurons; ++j) {
      std::vector<Expr> branches;
      for (std::size_t i = 0; i < layer.branches; ++i) {
        std::vector<Expr> parts;
        parts.push_back(Expr::constant(p[net.w2_index(l, j, i, K)]));
        for (std::size_t k = 0; k < K; ++k) {
          const double s = p[net.w2_index(l, j, i, k)];
          if (s == 0.0) continue;
          std::vector<Expr> arg;
          for (std::size_t c = 0; c < z.size(); ++c) {
            const double w = p[net.w1_index(l, j, i, k, c)];
            if (w != 0.0) arg.push_back(scaled(w, z[c]));
          }
          parts.push_back(scaled(s, make_apply(net.ops().ops[k], make_sum(std::move(arg)))));
        }
        branches.push_back(make_sum(std::move(parts)));
      }
      next.push_back(make_product(std::move(branches)));
    }
    z = std::move(next);
  }

  std::vector<Expr> out;
  for (std::size_t m = 0; m < net.outputs(); ++m) {
    std::vector<Expr> num, den;
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double a = p[net.w3_index(m, j)], b = p[net.w4_index(m, j)];
      if (a != 0.0) num.push_back(scaled(a, z[j]));
      if (b != 0.0) den.push_back(scaled(b, z[j]));
    }
    Expr n = make_sum(std::move(num)), d = make_sum(std::move(den));
    if (d.is_const() && (d.value <= net.delta() || (n.is_const() && n.value == 0.0))) {
      out.push_back(Expr::constant(0.0));
    } else if (d.is_const() && d.value == 1.0) {
      out.push_back(std::move(n));
    } else if (n.is_const() && n.value == 0.0) {
      out.push_back(Expr::constant(0.0));
    } else {
      Expr q;
      q.kind = Expr::Kind::Quotient;
      q.delta = net.delta();
      q.args = {std::move(n), std::move(d)};
      out.push_back(std::move(q));
    }
  }
  return out;
}

// --- checkpoints ------------------------------------------------------------------

nlohmann::json to_json(const OdeNetwork& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) layers.push_back({{"neurons", l.neurons}, {"branches", l.branches}});
  const auto& in = net.inputs();
  return {{"format", "odenet-v1"},
          {"operators", net.ops().names()},
          {"inputs", {{"n", in.n}, {"p", in.p}, {"nw", in.nw}, {"raw_time", in.raw_time}, {"omegas", in.omegas}}},
          {"outputs", net.outputs()},
          {"layers", layers},
          {"delta", net.delta()},
          {"params", net.params()},
          {"frozen", net.frozen()}};
}

OdeNetwork network_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "odenet-v1") throw ConfigError("not an odenet-v1 checkpoint");
  std::vector<OpKind> ops;
  for (const auto& s : j.at("operators")) ops.push_back(parse_op(s.get<std::string>()));
  InputLayout in;
  const auto& ji = j.at("inputs");
  in.n = ji.at("n").get<std::size_t>();
  in.p = ji.at("p").get<std::size_t>();
  in.nw = ji.at("nw").get<std::size_t>();
  in.raw_time = ji.at("raw_time").get<bool>();
  in.omegas = ji.at("omegas").get<std::vector<double>>();
  std::vector<OdeNetwork::Layer> layers;
  for (const auto& l : j.at("layers")) layers.push_back({l.at("neurons").get<std::size_t>(), l.at("branches").get<std::size_t>()});
  OdeNetwork net(OperatorSet(std::move(ops)), in, j.at("outputs").get<std::size_t>(), layers, j.at("delta").get<double>());
  const auto params = j.at("params").get<std::vector<double>>();
  const auto frozen = j.at("frozen").get<std::vector<std::uint8_t>>();
  if (params.size() != net.num_params() || frozen.size() != net.num_params())
    throw ConfigError("odenet-v1 checkpoint: weight count does not match the declared shapes");
  net.params() = params;
  net.frozen() = frozen;
  return net;
}

void save_network(const std::filesystem::path& path, const OdeNetwork& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_json(net).dump(1) << "\n";
}

OdeNetwork load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return network_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace odelearn::eqlnet
