#include "odelearn/learner.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "odelearn/ekbf.hpp"

namespace odelearn::learner {

using eqlnet::OpKind;

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

namespace {

bool closed_form_op(OpKind op) {
  return op == OpKind::Identity || op == OpKind::Square || op == OpKind::Sin || op == OpKind::Cos;
}

// A weight may influence the result: nonzero, or a trainable tape variable.
template <class T>
bool live(const T& w) {
  if constexpr (std::is_same_v<T, Var>)
    return !w.is_constant() || w.value() != 0.0;
  else
    return w != 0.0;
}

// coef * op(a.x + b) contributing to output `out`.
template <class T>
struct Atom {
  std::size_t out = 0;
  T coef;
  OpKind op = OpKind::Identity;
  VecX<T> a;
  T b;
};

template <class T>
struct Decomposition {
  VecX<T> c0;
  std::vector<Atom<T>> atoms;
};

// Writes a single-layer network with at most one x-dependent branch per
// neuron and an x-independent denominator as c0 + sum of atoms.
template <class T>
std::optional<Decomposition<T>> decompose(const eqlnet::OdeNetwork& net, std::span<const T> p, const VecX<T>& u,
                                          const T& t) {
  if (net.layers().size() != 1) return std::nullopt;
  const auto& in = net.inputs();
  const std::size_t n = in.n;
  const VecX<T> zx = in.assemble<T>(VecX<T>::Zero(static_cast<Eigen::Index>(n)), u, VecX<T>(), t);
  const std::size_t L = static_cast<std::size_t>(zx.size()) + 1;
  const std::size_t K = net.ops().size();
  const auto& layer = net.layers()[0];

  std::vector<T> neuron_const(layer.neurons);
  std::vector<std::vector<Atom<T>>> neuron_atoms(layer.neurons);
  for (std::size_t j = 0; j < layer.neurons; ++j) {
    T prod_const(1.0), varying_const(0.0);
    std::vector<Atom<T>> varying;
    bool has_varying = false;
    for (std::size_t i = 0; i < layer.branches; ++i) {
      T bconst = p[net.w2_index(0, j, i, K)];
      std::vector<Atom<T>> batoms;
      for (std::size_t k = 0; k < K; ++k) {
        const T& scale = p[net.w2_index(0, j, i, k)];
        if (!live(scale)) continue;
        bool dep = false;
        for (std::size_t l = 0; l < n; ++l) dep = dep || live(p[net.w1_index(0, j, i, k, 1 + l)]);
        T arg = p[net.w1_index(0, j, i, k, 0)];
        for (std::size_t l = n; l + 1 < L; ++l)
          arg += p[net.w1_index(0, j, i, k, 1 + l)] * zx[static_cast<Eigen::Index>(l)];
        const OpKind op = net.ops().ops[k];
        if (!dep) {
          bconst += scale * eqlnet::apply_op(op, arg);
          continue;
        }
        if (!closed_form_op(op)) return std::nullopt;
        Atom<T> at;
        at.coef = scale;
        at.op = op;
        at.a.resize(static_cast<Eigen::Index>(n));
        for (std::size_t l = 0; l < n; ++l) at.a[static_cast<Eigen::Index>(l)] = p[net.w1_index(0, j, i, k, 1 + l)];
        at.b = arg;
        batoms.push_back(std::move(at));
      }
      if (batoms.empty()) {
        prod_const = prod_const * bconst;
      } else {
        if (has_varying) return std::nullopt;
        has_varying = true;
        varying_const = bconst;
        varying = std::move(batoms);
      }
    }
    if (!has_varying) {
      neuron_const[j] = prod_const;
    } else {
      neuron_const[j] = prod_const * varying_const;
      for (auto& at : varying) at.coef = at.coef * prod_const;
      neuron_atoms[j] = std::move(varying);
    }
  }

  Decomposition<T> d;
  d.c0.resize(static_cast<Eigen::Index>(net.outputs()));
  for (std::size_t m = 0; m < net.outputs(); ++m) {
    T den = p[net.w4_index(m, 0)];
    T num = p[net.w3_index(m, 0)];
    for (std::size_t j = 0; j < layer.neurons; ++j) {
      const T& w4 = p[net.w4_index(m, j + 1)];
      if (live(w4)) {
        if (!neuron_atoms[j].empty()) return std::nullopt;
        den += w4 * neuron_const[j];
      }
      num += p[net.w3_index(m, j + 1)] * neuron_const[j];
    }
    const auto mi = static_cast<Eigen::Index>(m);
    if (!(ad::value_of(den) > net.delta())) {
      d.c0[mi] = T(0.0);
      continue;
    }
    d.c0[mi] = num / den;
    for (std::size_t j = 0; j < layer.neurons; ++j) {
      const T& w3 = p[net.w3_index(m, j + 1)];
      if (!live(w3)) continue;
      for (const auto& at : neuron_atoms[j]) {
        Atom<T> scaled = at;
        scaled.out = m;
        scaled.coef = at.coef * w3 / den;
        d.atoms.push_back(std::move(scaled));
      }
    }
  }
  return d;
}

// E[op(s)], E[op'(s)], E[op''(s)] for s ~ N(m, v).
template <class T>
void op_expectations(OpKind op, const T& m, const T& v, T& e0, T& e1, T& e2) {
  using std::cos;
  using std::exp;
  using std::sin;
  switch (op) {
    case OpKind::Identity:
      e0 = m;
      e1 = T(1.0);
      e2 = T(0.0);
      return;
    case OpKind::Square:
      e0 = m * m + v;
      e1 = 2.0 * m;
      e2 = T(2.0);
      return;
    case OpKind::Sin: {
      const T damp = exp(-0.5 * v);
      e0 = damp * sin(m);
      e1 = damp * cos(m);
      e2 = -e0;
      return;
    }
    case OpKind::Cos: {
      const T damp = exp(-0.5 * v);
      e0 = damp * cos(m);
      e1 = -damp * sin(m);
      e2 = -e0;
      return;
    }
    default: throw ConfigError("no closed-form moments for operator " + eqlnet::op_name(op));
  }
}

template <class T>
struct AtomStats {
  T m, v, e0, e1, e2;
  VecX<T> sa;  // S^T a
};

// Cov(op1(s1), op2(s2)) for jointly Gaussian s1, s2 with cross-covariance c.
template <class T>
T pair_cov(OpKind op1, const AtomStats<T>& s1, OpKind op2, const AtomStats<T>& s2, const T& c) {
  using std::cos;
  using std::exp;
  using std::sin;
  if (op1 == OpKind::Identity) return c * s2.e1;
  if (op2 == OpKind::Identity) return c * s1.e1;
  if (op1 == OpKind::Square) return 2.0 * s1.m * c * s2.e1 + c * c * s2.e2;
  if (op2 == OpKind::Square) return 2.0 * s2.m * c * s1.e1 + c * c * s1.e2;
  const T vsum = s1.v + s2.v;
  const T dminus = exp(-0.5 * (vsum - 2.0 * c)), dplus = exp(-0.5 * (vsum + 2.0 * c));
  const T mm = s1.m - s2.m, mp = s1.m + s2.m;
  T joint;
  if (op1 == OpKind::Sin && op2 == OpKind::Sin)
    joint = 0.5 * (dminus * cos(mm) - dplus * cos(mp));
  else if (op1 == OpKind::Cos && op2 == OpKind::Cos)
    joint = 0.5 * (dminus * cos(mm) + dplus * cos(mp));
  else if (op1 == OpKind::Sin)  // sin s1 cos s2
    joint = 0.5 * (dplus * sin(mp) + dminus * sin(mm));
  else  // cos s1 sin s2
    joint = 0.5 * (dplus * sin(mp) - dminus * sin(mm));
  return joint - s1.e0 * s2.e0;
}

template <class T>
Moments<T> closed_form(const Decomposition<T>& d, const VecX<T>& xi, const MatX<T>& S) {
  const auto q = d.c0.size();
  Moments<T> mo;
  mo.mu = d.c0;
  mo.sigma2 = VecX<T>::Zero(q);
  std::vector<AtomStats<T>> st(d.atoms.size());
  for (std::size_t k = 0; k < d.atoms.size(); ++k) {
    const auto& at = d.atoms[k];
    auto& s = st[k];
    s.m = at.a.dot(xi) + at.b;
    s.sa = S.transpose() * at.a;
    s.v = s.sa.squaredNorm();
    op_expectations(at.op, s.m, s.v, s.e0, s.e1, s.e2);
    mo.mu[static_cast<Eigen::Index>(at.out)] += at.coef * s.e0;
  }
  for (std::size_t k = 0; k < d.atoms.size(); ++k) {
    for (std::size_t l = k; l < d.atoms.size(); ++l) {
      if (d.atoms[k].out != d.atoms[l].out) continue;
      const T c = st[k].sa.dot(st[l].sa);
      const T cov = pair_cov(d.atoms[k].op, st[k], d.atoms[l].op, st[l], c);
      const T term = d.atoms[k].coef * d.atoms[l].coef * cov;
      mo.sigma2[static_cast<Eigen::Index>(d.atoms[k].out)] += k == l ? term : 2.0 * term;
    }
  }
  return mo;
}

template <class T>
Moments<T> sigma_points(const Function& output, std::span<const T> p, const VecX<T>& xi, const MatX<T>& S,
                        const VecX<T>& u, const T& t) {
  using std::sqrt;
  const auto n = xi.size();
  const double kappa = n < 3 ? 3.0 - static_cast<double>(n) : 0.0;
  const double spread = std::sqrt(static_cast<double>(n) + kappa);
  const double w0 = kappa / (static_cast<double>(n) + kappa);
  const double wi = 0.5 / (static_cast<double>(n) + kappa);
  auto eval = [&](const VecX<T>& x) -> VecX<T> {
    if constexpr (std::is_same_v<T, Var>)
      return output.eval(p, x, u, t);
    else
      return output.eval(p, x, u, t);
  };
  std::vector<VecX<T>> ys;
  std::vector<double> ws;
  if (w0 != 0.0) {
    ys.push_back(eval(xi));
    ws.push_back(w0);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const VecX<T> dx = spread * S.col(i);
    ys.push_back(eval(VecX<T>(xi + dx)));
    ws.push_back(wi);
    ys.push_back(eval(VecX<T>(xi - dx)));
    ws.push_back(wi);
  }
  const auto q = ys.front().size();
  Moments<T> mo;
  mo.mu = VecX<T>::Zero(q);
  for (std::size_t k = 0; k < ys.size(); ++k) mo.mu += ws[k] * ys[k];
  mo.sigma2 = VecX<T>::Zero(q);
  for (std::size_t k = 0; k < ys.size(); ++k) {
    const VecX<T> d = ys[k] - mo.mu;
    mo.sigma2 += ws[k] * VecX<T>(d.cwiseProduct(d));
  }
  return mo;
}

}  // namespace

template <class T>
Moments<T> propagate_moments_factor(const Function& output, std::span<const T> p, const VecX<T>& xi,
                                    const MatX<T>& S, const VecX<T>& u, const T& t, const Eigen::VectorXd& r_diag) {
  Moments<T> mo;
  std::optional<Decomposition<T>> d;
  if (const auto* nf = dynamic_cast<const NetworkFunction*>(&output)) d = decompose<T>(nf->network(), p, u, t);
  mo = d ? closed_form<T>(*d, xi, S) : sigma_points<T>(output, p, xi, S, u, t);
  for (Eigen::Index j = 0; j < mo.sigma2.size(); ++j) {
    if (r_diag.size() > 0) mo.sigma2[j] += r_diag[j];
    if (ad::value_of(mo.sigma2[j]) < kVarianceFloor) mo.sigma2[j] = T(kVarianceFloor);
  }
  return mo;
}

template Moments<double> propagate_moments_factor<double>(const Function&, std::span<const double>,
                                                          const Eigen::VectorXd&, const Eigen::MatrixXd&,
                                                          const Eigen::VectorXd&, const double&,
                                                          const Eigen::VectorXd&);
template Moments<Var> propagate_moments_factor<Var>(const Function&, std::span<const Var>, const VecV&, const MatV&,
                                                    const VecV&, const Var&, const Eigen::VectorXd&);

Moments<double> propagate_moments(const Eigen::VectorXd& xi, const Eigen::MatrixXd& psi, const Function& output,
                                  const Eigen::VectorXd& u, double t, const Eigen::VectorXd& r_diag) {
  const auto n = xi.size();
  if (psi.rows() != n || psi.cols() != n) throw ConfigError("propagate_moments: psi has the wrong shape");
  const double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
  if ((psi - psi.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw ConfigError("propagate_moments: psi is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(psi);
  if (es.eigenvalues().minCoeff() < -1e-12 * scale)
    throw ConfigError("propagate_moments: psi is not positive semidefinite");
  const Eigen::MatrixXd S = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  return propagate_moments_factor<double>(output, std::span<const double>(output.params()), xi, S, u, t, r_diag);
}

bool closed_form_moments(const Function& output) {
  const auto* nf = dynamic_cast<const NetworkFunction*>(&output);
  if (!nf) return false;
  const auto& in = nf->network().inputs();
  return decompose<double>(nf->network(), std::span<const double>(output.params()),
                           Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in.p)), 0.0)
      .has_value();
}

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

void LossWeights::validate() const {
  for (double a : {alpha1, alpha2, alpha3, alpha4, alpha41, alpha42})
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("loss weights must be finite and nonnegative");
  if (!(alpha1 > 0.0)) throw ConfigError("alpha1 must be positive");
  if (!(delta > 0.0)) throw ConfigError("delta must be positive");
}

double weighted(const LossComponents& c, const LossWeights& w) {
  return w.alpha1 * c.l1 + w.alpha2 * c.l2 + w.alpha3 * c.l3 + w.alpha4 * c.l4;
}

double total_loss(std::span<const LossComponents> per_sample, const LossWeights& w) {
  if (per_sample.empty()) throw ConfigError("total_loss needs at least one sample");
  double s = 0.0;
  for (const auto& c : per_sample) s += weighted(c, w);
  return s / static_cast<double>(per_sample.size());
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

LearnerNetworks::LearnerNetworks(TimeNet mean_net, TimeNet cov_net, double cov_scale_, LearnedModel model_,
                                 Eigen::MatrixXd P0_, Eigen::VectorXd x0_, bool x0_trainable_)
    : mean(std::move(mean_net)),
      cov(std::move(cov_net)),
      cov_scale(cov_scale_),
      model(std::move(model_)),
      P0(std::move(P0_)),
      x0(std::move(x0_)),
      x0_trainable(x0_trainable_) {
  const auto n = dims().n;
  if (mean.out_dim() != n) throw ConfigError("mean network must have one output per state");
  if (cov.out_dim() != n * (n + 1) / 2) throw ConfigError("covariance network must output n(n+1)/2 factor entries");
  if (static_cast<std::size_t>(x0.size()) != n) throw ConfigError("x0 must have one entry per state");
  if (static_cast<std::size_t>(P0.rows()) != n || static_cast<std::size_t>(P0.cols()) != n)
    throw ConfigError("P0 must be n x n");
  if (!(cov_scale > 0.0)) throw ConfigError("cov_scale must be positive");
}

LearnerNetworks::Blocks LearnerNetworks::blocks() const {
  Blocks b;
  b.mean = 0;
  b.cov = b.mean + mean.params().size();
  b.state = b.cov + cov.params().size();
  b.output = b.state + model.state().params().size();
  b.x0 = b.output + model.output().params().size();
  b.total = b.x0 + static_cast<std::size_t>(x0.size());
  return b;
}

std::vector<double> LearnerNetworks::flatten() const {
  std::vector<double> th;
  th.reserve(blocks().total);
  for (const auto* v : {&mean.params(), &cov.params(), &model.state().params(), &model.output().params()})
    th.insert(th.end(), v->begin(), v->end());
  th.insert(th.end(), x0.data(), x0.data() + x0.size());
  return th;
}

void LearnerNetworks::assign(std::span<const double> theta) {
  const auto b = blocks();
  if (theta.size() != b.total) throw ConfigError("parameter vector has the wrong size");
  auto copy = [&](std::vector<double>& dst, std::size_t off) {
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(off),
              theta.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
  };
  copy(mean.params(), b.mean);
  copy(cov.params(), b.cov);
  copy(model.state().params(), b.state);
  copy(model.output().params(), b.output);
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0[i] = theta[b.x0 + static_cast<std::size_t>(i)];
}

std::vector<std::uint8_t> LearnerNetworks::frozen_mask() const {
  const auto b = blocks();
  std::vector<std::uint8_t> f(b.total, 0);
  std::copy(model.state().frozen().begin(), model.state().frozen().end(), f.begin() + static_cast<std::ptrdiff_t>(b.state));
  std::copy(model.output().frozen().begin(), model.output().frozen().end(),
            f.begin() + static_cast<std::ptrdiff_t>(b.output));
  if (!x0_trainable) std::fill(f.begin() + static_cast<std::ptrdiff_t>(b.x0), f.end(), 1);
  return f;
}

Eigen::VectorXd LearnerNetworks::mean_at(double t) const {
  return mean.forward<double>(std::span<const double>(mean.params()), t);
}

Eigen::MatrixXd LearnerNetworks::cov_at(double t) const {
  const Eigen::MatrixXd L = cov_factor<double>(std::span<const double>(cov.params()), t);
  return L * L.transpose();
}

LearnerNetworks build_networks(const ArchitectureConfig& arch, const dynamics::Dataset& data, std::uint64_t seed) {
  data.validate();
  if (data.size() < 2) throw ConfigError("training needs at least two samples");
  const std::size_t n = arch.n, p = data.input_dim(), q = data.output_dim();
  if (n == 0) throw ConfigError("the number of states must be positive");
  if (!arch.omega_search.empty() && arch.state_kind != "parametric")
    throw ConfigError("omega_search needs the parametric duffing model and two bounds");
  const Rng root(seed);

  std::unique_ptr<Function> state;
  eqlnet::InputLayout layout;
  layout.n = n;
  layout.p = p;
  layout.raw_time = arch.raw_time;
  layout.omegas = arch.omegas;
  if (arch.state_kind == "odenet") {
    std::vector<eqlnet::OdeNetwork::Layer> layers(arch.state_layers, {arch.state_neurons, arch.state_branches});
    eqlnet::OdeNetwork net(eqlnet::OperatorSet::parse(arch.state_ops), layout, n, layers, arch.delta);
    Rng r = root.split("state");
    net.init_random(r, arch.init_scale);
    if (!arch.state_prior.terms.empty() || arch.state_prior.situation != eqlnet::Situation::Unknown)
      net = eqlnet::precondition(std::move(net), arch.state_prior);
    state = std::make_unique<NetworkFunction>(std::move(net));
  } else if (arch.state_kind == "mlp") {
    Mlp mlp(layout.size(), arch.state_hidden, n);
    Rng r = root.split("state");
    mlp.init(r, arch.init_scale);
    state = std::make_unique<MlpFunction>(layout, std::move(mlp));
  } else if (arch.state_kind == "parametric") {
    auto f = std::make_unique<ParametricFunction>(arch.parametric_system, arch.parametric_init);
    if (!arch.omega_search.empty()) {
      if (arch.parametric_system != "duffing" || arch.omega_search.size() != 2)
        throw ConfigError("omega_search needs the parametric duffing model and two bounds");
      f->params()[4] = dynamics::dominant_frequency(data, 0, arch.omega_search[0], arch.omega_search[1]);
    }
    if (f->out_dim() != n) throw ConfigError("parametric model has a different number of states");
    if (!arch.parametric_frozen.empty()) {
      if (arch.parametric_frozen.size() != f->params().size())
        throw ConfigError("parametric frozen mask has the wrong length");
      f->frozen() = arch.parametric_frozen;
    }
    state = std::move(f);
  } else {
    throw ConfigError("unknown state model kind '" + arch.state_kind + "'");
  }

  eqlnet::InputLayout out_layout;
  out_layout.n = n;
  out_layout.p = p;
  out_layout.raw_time = false;
  eqlnet::OdeNetwork out_net(eqlnet::OperatorSet::parse(arch.output_ops), out_layout, q,
                             {{arch.output_neurons, 1}}, arch.delta);
  {
    Rng r = root.split("output");
    out_net.init_random(r, arch.init_scale);
  }
  if (!arch.output_prior.terms.empty()) out_net = eqlnet::precondition(std::move(out_net), arch.output_prior);
  if (!arch.output_trainable) std::fill(out_net.frozen().begin(), out_net.frozen().end(), 1);
  auto output = std::make_unique<NetworkFunction>(std::move(out_net));

  Eigen::VectorXd qd = arch.q_diag.size() ? arch.q_diag : Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1e-4);
  Eigen::VectorXd rd = arch.r_diag.size() ? arch.r_diag : Eigen::VectorXd::Constant(static_cast<Eigen::Index>(q), 1e-4);
  if (static_cast<std::size_t>(qd.size()) != n || static_cast<std::size_t>(rd.size()) != q)
    throw ConfigError("noise diagonals do not match the state/output dimensions");
  LearnedModel model(std::move(state), std::move(output), p, NoiseModel::diagonal(qd, rd));

  // Initial state: recorded, or the first measurement lifted through the
  // output linearization at the origin.
  Eigen::VectorXd x0;
  bool x0_trainable = false;
  if (data.x0) {
    x0 = *data.x0;
    if (static_cast<std::size_t>(x0.size()) != n) throw ConfigError("dataset x0 does not match the number of states");
  } else {
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    const Eigen::VectorXd u0 = data.inputs.row(0).transpose();
    const auto lin = ekbf::linearize(model, zero, u0, data.times[0]);
    const Eigen::VectorXd r = data.measurements.row(0).transpose() - model.g0(zero, u0, data.times[0]);
    x0 = lin.C.completeOrthogonalDecomposition().pseudoInverse() * r;
    x0_trainable = true;
  }

  // One time-network segment per independent recording.
  std::vector<double> starts{data.times.front()};
  for (double t : data.meta.segment_starts)
    if (t > starts.back() && t <= data.times.back()) starts.push_back(t);
  std::vector<double> spans;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    double last = starts[k];
    for (double t : data.times)
      if (t >= starts[k] && (k + 1 == starts.size() || t < starts[k + 1])) last = t;
    spans.push_back(last > starts[k] ? last - starts[k] : 1.0);
  }

  TimeNet mean(n, arch.mean_fourier, arch.mean_hidden, starts, spans);
  {
    Rng r = root.split("mean");
    mean.init(r, 0.1);
  }
  for (std::size_t k = 0; k < mean.segments(); ++k)
    for (std::size_t i = 0; i < n; ++i) mean.params()[mean.output_bias_offset(k) + i] = x0[static_cast<Eigen::Index>(i)];

  TimeNet cov(n * (n + 1) / 2, arch.cov_fourier, arch.cov_hidden, starts, spans);
  {
    Rng r = root.split("cov");
    cov.init(r, 0.01);
  }
  for (std::size_t k = 0; k < cov.segments(); ++k) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++c)
        cov.params()[cov.output_bias_offset(k) + c] = i == j ? std::sqrt(arch.p0) / arch.cov_scale : 0.0;
  }

  const Eigen::MatrixXd P0 = arch.p0 * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  return LearnerNetworks(std::move(mean), std::move(cov), arch.cov_scale, std::move(model), P0, x0, x0_trainable);
}

// ---------------------------------------------------------------------------
// Loss evaluation
// ---------------------------------------------------------------------------

namespace {

struct SampleTerms {
  Var l1, l2, l3, r1;
};

struct Unbind {
  const LearnedModel& m;
  ~Unbind() { m.unbind(); }
};

struct ParamSpans {
  std::span<const Var> mean, cov, state, output, x0;
};

ParamSpans split(const LearnerNetworks& nets, std::span<const Var> pv) {
  const auto b = nets.blocks();
  return {pv.subspan(b.mean, b.cov - b.mean), pv.subspan(b.cov, b.state - b.cov),
          pv.subspan(b.state, b.output - b.state), pv.subspan(b.output, b.x0 - b.output),
          pv.subspan(b.x0, b.total - b.x0)};
}

std::vector<Var> make_params(ad::Tape& tape, std::span<const double> theta, const std::vector<std::uint8_t>& frozen) {
  std::vector<Var> pv(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) pv[i] = frozen[i] ? Var(theta[i]) : tape.input(theta[i]);
  return pv;
}

VecV row_as_var(const Eigen::MatrixXd& m, std::size_t i) {
  return to_scalar<Var>(Eigen::VectorXd(m.row(static_cast<Eigen::Index>(i)).transpose()));
}

SampleTerms sample_terms(ad::Tape& tape, const LearnerNetworks& nets, std::span<const Var> pv,
                         const dynamics::Dataset& data, std::size_t i, const LossWeights& w) {
  const ParamSpans ps = split(nets, pv);
  const auto n = static_cast<Eigen::Index>(nets.dims().n);
  const Var t = tape.input(data.times[i]);
  const std::span<const Var> wrt_t(&t, 1);
  const VecV u = row_as_var(data.inputs, i);
  const VecV ybar = row_as_var(data.measurements, i);

  const VecV xi = nets.mean.forward<Var>(ps.mean, t);
  nets.model.bind(ps.state, ps.output);
  Unbind guard{nets.model};
  // Linearize before recording anything else after xi so the Jacobian sweeps
  // only cover the model evaluation.
  const auto lin = ekbf::linearize_graph(tape, nets.model, xi, u, t, nets.model.noise());

  VecV xi_dot(n);
  for (Eigen::Index j = 0; j < n; ++j) xi_dot[j] = tape.gradient_graph(xi[j], wrt_t)[0];

  const VecV raw = nets.cov.forward<Var>(ps.cov, t);
  VecV raw_dot(raw.size());
  for (Eigen::Index k = 0; k < raw.size(); ++k) raw_dot[k] = tape.gradient_graph(raw[k], wrt_t)[0];
  const MatV L = nets.factor_from_raw<Var>(raw);
  const MatV Ld = nets.factor_from_raw<Var>(raw_dot);
  const MatV psi = L * L.transpose();
  const MatV psi_dot = Ld * L.transpose() + L * Ld.transpose();

  const MatV K = ekbf::kalman_gain<Var>(psi, lin.C, lin.Rhat);
  const VecV Xi = ekbf::mean_rhs<Var>(nets.model, xi, u, ybar, K, t);
  const MatV Psi = ekbf::cov_rhs<Var>(lin.A, psi, K, lin.C, lin.Qhat);

  const Eigen::VectorXd rdiag = nets.model.noise().R.diagonal();
  const auto mo = propagate_moments_factor<Var>(nets.model.output(), ps.output, xi, L, u, t, rdiag);

  SampleTerms s;
  s.l1 = loss_l1<Var>(ybar, mo.mu, mo.sigma2);
  s.l2 = smooth_norm<Var>(MatV(xi_dot - Xi));
  s.l3 = smooth_norm<Var>(MatV(psi_dot - Psi));
  Var r1(0.0);
  for (const VecV& den : {nets.model.state().denominators(ps.state, xi, u, t),
                          nets.model.output().denominators(ps.output, xi, u, t)})
    for (Eigen::Index m = 0; m < den.size(); ++m) r1 += ad::max_smooth(Var(w.delta) - den[m]);
  s.r1 = r1;
  return s;
}

struct SharedTerms {
  Var ic2, ic3, r0;
};

// Initial-condition and weight-sparsity terms, identical for every sample.
SharedTerms shared_terms(const LearnerNetworks& nets, std::span<const Var> pv, const std::vector<std::uint8_t>& frozen,
                         const LossWeights& w) {
  const ParamSpans ps = split(nets, pv);
  const auto b = nets.blocks();
  VecV x0(static_cast<Eigen::Index>(ps.x0.size()));
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0[i] = ps.x0[static_cast<std::size_t>(i)];
  const MatV P0 = nets.P0.cast<Var>();
  SharedTerms s{Var(0.0), Var(0.0), Var(0.0)};
  // Every segment restarts from x0 and P0.
  for (std::size_t k = 0; k < nets.mean.segments(); ++k) {
    const Var t0(nets.mean.start(k));
    const VecV xi0 = nets.mean.forward<Var>(ps.mean, t0);
    const MatV L = nets.cov_factor<Var>(ps.cov, t0);
    s.ic2 += smooth_norm<Var>(MatV(xi0 - x0));
    s.ic3 += smooth_norm<Var>(MatV(L * L.transpose() - P0));
  }
  Var r0(0.0);
  auto add = [&](const Function& f, std::size_t off) {
    if (!f.sparsified()) return;
    for (std::size_t k = 0; k < f.params().size(); ++k)
      if (!frozen[off + k]) r0 += eqlnet::reg_r0(pv[off + k], w.a);
  };
  add(nets.model.state(), b.state);
  add(nets.model.output(), b.output);
  s.r0 = r0;
  return s;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

BatchResult evaluate_batch(const LearnerNetworks& nets, std::span<const double> theta, const dynamics::Dataset& data,
                           std::span<const std::size_t> indices, const LossWeights& w, bool with_gradient,
                           ad::Tape& tape) {
  const auto b = nets.blocks();
  if (theta.size() != b.total) throw ConfigError("parameter vector has the wrong size");
  if (indices.empty()) throw ConfigError("empty batch");
  const auto frozen = nets.frozen_mask();
  BatchResult res;
  if (with_gradient) res.gradient.assign(b.total, 0.0);
  const double inv = 1.0 / static_cast<double>(indices.size());
  double s1 = 0, s2 = 0, s3 = 0, sr1 = 0;

  for (std::size_t idx : indices) {
    tape.clear();
    const auto pv = make_params(tape, theta, frozen);
    SampleTerms s;
    try {
      s = sample_terms(tape, nets, pv, data, idx, w);
    } catch (const ad::DomainError&) {
      res.finite = false;
      continue;
    } catch (const ekbf::FilterConfigError&) {
      res.finite = false;
      continue;
    }
    const double v1 = s.l1.value(), v2 = s.l2.value(), v3 = s.l3.value(), vr = s.r1.value();
    if (!finite(v1) || !finite(v2) || !finite(v3) || !finite(vr)) {
      res.finite = false;
      continue;
    }
    s1 += v1;
    s2 += v2;
    s3 += v3;
    sr1 += vr;
    if (with_gradient) {
      const Var total = w.alpha1 * s.l1 + w.alpha2 * s.l2 + w.alpha3 * s.l3 + (w.alpha4 * w.alpha42) * s.r1;
      tape.accumulate_gradient(total, pv, inv, res.gradient);
    }
  }

  tape.clear();
  const auto pv = make_params(tape, theta, frozen);
  const SharedTerms sh = shared_terms(nets, pv, frozen, w);
  if (with_gradient) {
    const Var total = w.alpha2 * sh.ic2 + w.alpha3 * sh.ic3 + (w.alpha4 * w.alpha41) * sh.r0;
    tape.accumulate_gradient(total, pv, 1.0, res.gradient);
  }
  tape.clear();

  res.components.l1 = s1 * inv;
  res.components.l2 = sh.ic2.value() + s2 * inv;
  res.components.l3 = sh.ic3.value() + s3 * inv;
  res.components.l4 = w.alpha41 * sh.r0.value() + w.alpha42 * sr1 * inv;
  res.total = weighted(res.components, w);
  if (!finite(res.total)) res.finite = false;
  for (double g : res.gradient)
    if (!finite(g)) {
      res.finite = false;
      break;
    }
  return res;
}

BatchResult evaluate_all(const LearnerNetworks& nets, const dynamics::Dataset& data, const LossWeights& w) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  ad::Tape tape;
  const auto theta = nets.flatten();
  return evaluate_batch(nets, theta, data, idx, w, false, tape);
}

std::vector<LossComponents> sample_components(const LearnerNetworks& nets, const dynamics::Dataset& data,
                                              const LossWeights& w) {
  const auto theta = nets.flatten();
  const auto frozen = nets.frozen_mask();
  std::vector<LossComponents> out;
  ad::Tape tape;
  for (std::size_t i = 0; i < data.size(); ++i) {
    tape.clear();
    const auto pv = make_params(tape, theta, frozen);
    const auto s = sample_terms(tape, nets, pv, data, i, w);
    out.push_back({s.l1.value(), s.l2.value(), s.l3.value(), w.alpha42 * s.r1.value()});
  }
  return out;
}

namespace {

// PINN loss over `indices` plus the initial-condition term.
double pinn_batch(const TimeNet& mean, std::span<const double> p, const StateSpaceModel& f,
                  const dynamics::Dataset& data, std::span<const std::size_t> indices, const Eigen::VectorXd& x0,
                  std::vector<double>* gradient) {
  ad::Tape tape;
  const auto n = static_cast<Eigen::Index>(f.dims().n);
  double total = 0.0;
  if (gradient) gradient->assign(p.size(), 0.0);
  auto params = [&] { return tape.inputs(p); };
  for (std::size_t i : indices) {
    tape.clear();
    const auto pv = params();
    const Var t = tape.input(data.times[i]);
    const VecV x = mean.forward<Var>(std::span<const Var>(pv), t);
    VecV dx(n);
    for (Eigen::Index j = 0; j < n; ++j) dx[j] = tape.gradient_graph(x[j], std::span<const Var>(&t, 1))[0];
    const VecV u = row_as_var(data.inputs, i);
    const VecV r = dx - f.f(x, u, VecV::Zero(n), t);
    Var s = r.squaredNorm();
    total += s.value();
    if (gradient) tape.accumulate_gradient(s, pv, 1.0, *gradient);
  }
  tape.clear();
  const auto pv = params();
  const VecV x = mean.forward<Var>(std::span<const Var>(pv), Var(mean.t0()));
  const Var s = (x - to_scalar<Var>(x0)).squaredNorm();
  total += s.value();
  if (gradient) tape.accumulate_gradient(s, pv, 1.0, *gradient);
  return total;
}

}  // namespace

double loss_pinn(const TimeNet& mean, std::span<const double> p, const StateSpaceModel& f,
                 const dynamics::Dataset& data, const Eigen::VectorXd& x0, std::vector<double>* gradient) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  return pinn_batch(mean, p, f, data, idx, x0, gradient);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  weights.validate();
  if (mode != "ekbf" && mode != "pinn") throw ConfigError("training mode must be 'ekbf' or 'pinn'");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (max_bad_steps < 1) throw ConfigError("max_bad_steps must be at least 1");
  if (!(divergence_factor > 0.0)) throw ConfigError("divergence_factor must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
}

Adam::Adam(std::size_t size, double beta1, double beta2, double eps)
    : m_(size, 0.0), v_(size, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<double>& theta, const std::vector<double>& grad, const std::vector<std::uint8_t>& frozen,
                double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    theta[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

namespace {

double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total) {
  if (c.learning_rate_final < 0.0 || total <= 1) return c.learning_rate;
  const double f = static_cast<double>(step) / static_cast<double>(total - 1);
  return c.learning_rate_final + 0.5 * (c.learning_rate - c.learning_rate_final) * (1.0 + std::cos(std::numbers::pi * f));
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

// A finite loss that has grown far beyond where training started.
bool blew_up(double total, double initial, double factor) {
  return finite(total) && finite(initial) && total - initial > factor * std::max(1.0, std::abs(initial));
}

TrainReport train_pinn(LearnerNetworks& nets, const dynamics::Dataset& data, const TrainConfig& config) {
  TrainReport rep;
  const auto& f = nets.model;
  std::vector<double> p = nets.mean.params();
  rep.initial.l2 = loss_pinn(nets.mean, p, f, data, nets.x0);
  rep.initial_total = rep.initial.l2;
  Adam adam(p.size(), config.beta1, config.beta2, config.adam_eps);
  Rng rng = Rng(config.seed).split("minibatch");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t B = std::min(config.batch_size, data.size());
  const std::size_t per_epoch = (data.size() + B - 1) / B;
  const std::size_t epochs = config.epochs_fit + config.epochs_sparse;
  std::vector<double> grad;
  int bad = 0;
  for (std::size_t e = 0; e < epochs && !rep.diverged; ++e) {
    shuffle(order, rng);
    double sum = 0.0;
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const std::size_t a = s * B, z = std::min(a + B, order.size());
      const double v = pinn_batch(nets.mean, p, f, data, std::span(order).subspan(a, z - a), nets.x0, &grad);
      const bool ok = finite(v) && std::all_of(grad.begin(), grad.end(), finite);
      if (!ok) {
        ++rep.rejected_steps;
        if (++bad >= config.max_bad_steps) {
          rep.diverged = true;
          rep.divergence_message = "loss not finite for " + std::to_string(bad) + " consecutive steps";
          break;
        }
        continue;
      }
      bad = 0;
      adam.step(p, grad, {}, scheduled_lr(config, rep.steps, epochs * per_epoch));
      ++rep.steps;
      sum += v;
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.components.l2 = sum;
    rec.total = sum;
    nets.mean.params() = p;
    rep.epochs.push_back(rec);
    if (config.on_epoch) config.on_epoch(rec);
    if (blew_up(sum, rep.initial_total, config.divergence_factor)) {
      rep.diverged = true;
      rep.divergence_message = "loss grew to " + dynamics::format_double(sum) + " (epoch " + std::to_string(e + 1) + ")";
    }
  }
  nets.mean.params() = p;
  rep.final.l2 = loss_pinn(nets.mean, p, f, data, nets.x0);
  rep.final_total = rep.final.l2;
  return rep;
}

}  // namespace

TrainReport train(LearnerNetworks& nets, const dynamics::Dataset& data, const TrainConfig& config) {
  config.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("training needs a nonempty dataset");
  if (data.input_dim() != nets.dims().p || data.output_dim() != nets.dims().q)
    throw ConfigError("dataset dimensions do not match the networks");
  const auto start = std::chrono::steady_clock::now();
  TrainReport rep;
  if (config.mode == "pinn") {
    rep = train_pinn(nets, data, config);
  } else {
    const auto init = evaluate_all(nets, data, config.weights);
    rep.initial = init.components;
    rep.initial_total = init.total;

    std::vector<double> theta = nets.flatten();
    const auto frozen = nets.frozen_mask();
    Adam adam(theta.size(), config.beta1, config.beta2, config.adam_eps);
    Rng rng = Rng(config.seed).split("minibatch");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t B = std::min(config.batch_size, data.size());
    const std::size_t per_epoch = (data.size() + B - 1) / B;
    const std::size_t epochs = config.epochs_fit + config.epochs_sparse;
    ad::Tape tape;
    int bad = 0;
    for (std::size_t e = 0; e < epochs && !rep.diverged; ++e) {
      const int phase = e < config.epochs_fit ? 1 : 2;
      LossWeights w = config.weights;
      if (phase == 1) w.alpha4 = 0.0;
      shuffle(order, rng);
      LossComponents acc;
      double acc_total = 0.0;
      std::size_t seen = 0;
      for (std::size_t s = 0; s < per_epoch; ++s) {
        const std::size_t a = s * B, z = std::min(a + B, order.size());
        const auto res = evaluate_batch(nets, theta, data, std::span(order).subspan(a, z - a), w, true, tape);
        if (!res.finite) {
          ++rep.rejected_steps;
          if (++bad >= config.max_bad_steps) {
            rep.diverged = true;
            rep.divergence_message = "loss not finite for " + std::to_string(bad) + " consecutive steps (epoch " +
                                     std::to_string(e + 1) + ")";
            break;
          }
          continue;
        }
        bad = 0;
        adam.step(theta, res.gradient, frozen, scheduled_lr(config, rep.steps, epochs * per_epoch));
        ++rep.steps;
        const double k = static_cast<double>(z - a);
        acc.l1 += k * res.components.l1;
        acc.l2 += k * res.components.l2;
        acc.l3 += k * res.components.l3;
        acc.l4 += k * res.components.l4;
        acc_total += k * res.total;
        seen += z - a;
      }
      nets.assign(theta);
      if (seen == 0) continue;
      EpochRecord rec;
      rec.epoch = e + 1;
      rec.phase = phase;
      const double inv = 1.0 / static_cast<double>(seen);
      rec.components = {acc.l1 * inv, acc.l2 * inv, acc.l3 * inv, acc.l4 * inv};
      rec.total = acc_total * inv;
      rep.epochs.push_back(rec);
      if (config.on_epoch) config.on_epoch(rec);
      if (blew_up(rec.total, rep.initial_total, config.divergence_factor)) {
        rep.diverged = true;
        rep.divergence_message = "loss grew to " + dynamics::format_double(rec.total) + " (epoch " +
                                 std::to_string(e + 1) + ")";
      }
    }
    nets.assign(theta);
    const auto fin = evaluate_all(nets, data, config.weights);
    rep.final = fin.components;
    rep.final_total = fin.total;
  }
  if (!rep.diverged && !finite(rep.final_total)) {
    rep.diverged = true;
    rep.divergence_message = "final loss is not finite";
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

Eigen::MatrixXd json_matrix(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw ConfigError("ragged matrix in checkpoint");
    for (std::size_t k = 0; k < rows[i].size(); ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  }
  return m;
}

}  // namespace

nlohmann::json to_json(const LearnerNetworks& nets) {
  const auto d = nets.dims();
  std::vector<double> x0(nets.x0.data(), nets.x0.data() + nets.x0.size());
  return {{"format", "learner-v1"},
          {"dims", {{"n", d.n}, {"p", d.p}, {"q", d.q}}},
          {"mean", nets.mean.to_json()},
          {"cov", nets.cov.to_json()},
          {"cov_scale", nets.cov_scale},
          {"state", nets.model.state().to_json()},
          {"output", nets.model.output().to_json()},
          {"noise", {{"Q", matrix_json(nets.model.noise().Q)}, {"R", matrix_json(nets.model.noise().R)}}},
          {"P0", matrix_json(nets.P0)},
          {"x0", x0},
          {"x0_trainable", nets.x0_trainable}};
}

LearnerNetworks learner_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "learner-v1") throw ConfigError("not a learner-v1 checkpoint");
  const auto p = j.at("dims").at("p").get<std::size_t>();
  NoiseModel noise{json_matrix(j.at("noise").at("Q")), json_matrix(j.at("noise").at("R"))};
  LearnedModel model(function_from_json(j.at("state")), function_from_json(j.at("output")), p, std::move(noise));
  const auto x0 = j.at("x0").get<std::vector<double>>();
  return LearnerNetworks(TimeNet::from_json(j.at("mean")), TimeNet::from_json(j.at("cov")),
                         j.at("cov_scale").get<double>(), std::move(model), json_matrix(j.at("P0")),
                         Eigen::Map<const Eigen::VectorXd>(x0.data(), static_cast<Eigen::Index>(x0.size())),
                         j.at("x0_trainable").get<bool>());
}

void save_checkpoint(const std::filesystem::path& path, const LearnerNetworks& nets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_json(nets).dump(1) << "\n";
}

LearnerNetworks load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return learner_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

dynamics::Trajectory simulate_identified(const LearnerNetworks& nets, const dynamics::Dataset& data,
                                         dynamics::Method method, int substeps, std::optional<Eigen::VectorXd> x0) {
  const Eigen::VectorXd start = x0 ? *x0 : nets.x0;
  return dynamics::simulate(nets.model, start, data.times, data.inputs, method, substeps);
}

std::vector<std::string> identified_equations(const LearnerNetworks& nets, double prune_tol) {
  const auto* nf = dynamic_cast<const NetworkFunction*>(&nets.model.state());
  if (!nf) return {};
  const auto exprs = eqlnet::extract_expression(nf->network(), prune_tol);
  const auto names = nf->network().inputs().names();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < exprs.size(); ++i)
    out.push_back("dx" + std::to_string(i + 1) + "/dt = " + exprs[i].str(names));
  return out;
}

}  // namespace odelearn::learner
