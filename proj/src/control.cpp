#include "odelearn/control.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include "odelearn/random.hpp"

namespace odelearn::control {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRolloutLimit = 1e6;
}  // namespace

double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

double reward(std::span<const double> theta, std::size_t d) {
  if (d == 0 || theta.size() < d) throw ConfigError("reward needs at least d samples");
  double s = 0.0;
  for (std::size_t i = theta.size() - d; i < theta.size(); ++i) s -= std::abs(wrap_angle(theta[i]));
  return std::max(s / static_cast<double>(d), kRewardFloor);
}

void RlLoopConfig::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(episode_length, "episode length");
  positive(dt, "sample time");
  positive(switch_angle, "switch angle");
  positive(switch_window, "switch window");
  positive(random_bound, "random input bound");
  positive(random_hold, "random input hold");
  if (reward_window == 0) throw ConfigError("reward window must hold at least one sample");
  if (!(switch_fraction > 0.0 && switch_fraction <= 1.0)) throw ConfigError("switch fraction must lie in (0, 1]");
  if (!std::isfinite(stable_threshold)) throw ConfigError("stability threshold must be finite");
}

bool switch_criterion(std::span<const double> theta, double dt, const RlLoopConfig& config) {
  const auto window = static_cast<std::size_t>(std::llround(config.switch_window / dt));
  if (window == 0 || theta.size() < window) return false;
  std::size_t inside = 0;
  for (std::size_t i = theta.size() - window; i < theta.size(); ++i)
    if (std::abs(wrap_angle(theta[i])) < config.switch_angle) ++inside;
  return static_cast<double>(inside) >= config.switch_fraction * static_cast<double>(window) - 1e-9;
}

// ---------------------------------------------------------------------------
// MPC
// ---------------------------------------------------------------------------

std::size_t MpcConfig::steps() const {
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(horizon / control_dt)));
}

void MpcConfig::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("MPC horizon must be positive");
  if (!(control_dt > 0.0) || control_dt > horizon) throw ConfigError("MPC control step must lie in (0, horizon]");
  if (!(u_max > 0.0) || !std::isfinite(u_max)) throw ConfigError("MPC input bound must be positive and finite");
  if (iterations < 0 || substeps < 1 || memory == 0) throw ConfigError("invalid MPC optimizer settings");
  if (effort_weight < 0.0) throw ConfigError("MPC effort weight must be nonnegative");
  if (cost != "angle" && cost != "quadratic") throw ConfigError("MPC cost must be 'angle' or 'quadratic'");
}

namespace {

Eigen::VectorXd rhs(const StateSpaceModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& u, double t) {
  return m.f0(x, u, t);
}
VecV rhs(const StateSpaceModel& m, const VecV& x, const VecV& u, const Var& t) {
  return m.f(x, u, VecV::Constant(x.size(), Var(0.0)), t);
}

template <class T>
VecX<T> rollout_step(const StateSpaceModel& m, const VecX<T>& x, const VecX<T>& u, double t, double h,
                     dynamics::Method method) {
  const T tt(t), th(t + 0.5 * h), te(t + h);
  if (method == dynamics::Method::Euler) return x + h * rhs(m, x, u, tt);
  const VecX<T> k1 = rhs(m, x, u, tt);
  const VecX<T> k2 = rhs(m, VecX<T>(x + (0.5 * h) * k1), u, th);
  const VecX<T> k3 = rhs(m, VecX<T>(x + (0.5 * h) * k2), u, th);
  const VecX<T> k4 = rhs(m, VecX<T>(x + h * k3), u, te);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

template <class T>
T quad(const VecX<T>& v, const Eigen::MatrixXd& M) {
  T s(0.0);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    for (Eigen::Index j = 0; j < v.size(); ++j)
      if (M(i, j) != 0.0) s += M(i, j) * v[i] * v[j];
  return s;
}

// Rollout cost; sets `ok` to false when the state leaves the sane range.
template <class T>
T rollout_cost(const StateSpaceModel& m, const Eigen::VectorXd& x0, double t0, const std::vector<VecX<T>>& u,
               const MpcConfig& c, bool& ok) {
  using std::abs;
  ok = true;
  VecX<T> x = to_scalar<T>(x0);
  const double h = c.control_dt / c.substeps;
  const auto ai = static_cast<Eigen::Index>(c.angle_index);
  T angle(0.0), effort(0.0), quadratic(0.0);
  double t = t0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    if (c.cost == "quadratic") quadratic += c.control_dt * (quad<T>(x, c.Q) + quad<T>(u[k], c.R));
    for (Eigen::Index j = 0; j < u[k].size(); ++j) effort += u[k][j] * u[k][j];
    for (int s = 0; s < c.substeps; ++s, t += h) x = rollout_step<T>(m, x, u[k], t, h, c.method);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = ad::value_of(x[i]);
      if (!std::isfinite(v) || std::abs(v) > kRolloutLimit) {
        ok = false;
        return T(kInf);
      }
    }
    if (c.cost == "angle") {
      const double shift = 2.0 * std::numbers::pi * std::round(ad::value_of(x[ai]) / (2.0 * std::numbers::pi));
      angle += ad::abs_smooth(T(x[ai] - shift));
    }
  }
  if (c.cost == "quadratic") return quadratic + (c.Pf.size() ? quad<T>(x, c.Pf) : T(0.0));
  return angle * (1.0 / static_cast<double>(u.size())) + c.effort_weight * effort;
}

void check_plan_shape(const StateSpaceModel& m, const Eigen::VectorXd& x, const MpcConfig& c) {
  c.validate();
  const Dims d = m.dims();
  if (static_cast<std::size_t>(x.size()) != d.n) throw ConfigError("MPC state has the wrong dimension");
  if (d.p == 0) throw ConfigError("MPC needs a model with inputs");
  if (!x.allFinite()) throw ConfigError("MPC state is not finite");
  if (c.cost == "angle" && c.angle_index >= d.n) throw ConfigError("MPC angle index out of range");
  if (c.cost == "quadratic") {
    const auto n = static_cast<Eigen::Index>(d.n), p = static_cast<Eigen::Index>(d.p);
    if (c.Q.rows() != n || c.Q.cols() != n || c.R.rows() != p || c.R.cols() != p ||
        (c.Pf.size() && (c.Pf.rows() != n || c.Pf.cols() != n)))
      throw ConfigError("MPC quadratic weights have the wrong shape");
  }
}

struct Evaluator {
  const StateSpaceModel& model;
  const Eigen::VectorXd& x;
  double t;
  const MpcConfig& c;
  std::size_t p;
  ad::Tape tape;
  int count = 0;

  // Cost and gradient at the flat input vector z (row-major steps x p).
  double operator()(const Eigen::VectorXd& z, Eigen::VectorXd& g) {
    ++count;
    tape.clear();
    const std::size_t N = static_cast<std::size_t>(z.size()) / p;
    std::vector<Var> vars;
    vars.reserve(static_cast<std::size_t>(z.size()));
    std::vector<VecV> u(N, VecV(static_cast<Eigen::Index>(p)));
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t j = 0; j < p; ++j) {
        vars.push_back(tape.input(z[static_cast<Eigen::Index>(k * p + j)]));
        u[k][static_cast<Eigen::Index>(j)] = vars.back();
      }
    bool ok = true;
    Var J;
    try {
      J = rollout_cost<Var>(model, x, t, u, c, ok);
    } catch (const ad::DomainError&) {
      ok = false;
    }
    g = Eigen::VectorXd::Zero(z.size());
    if (!ok || !std::isfinite(J.value())) return kInf;
    const auto grad = tape.gradient(J, vars);
    for (std::size_t i = 0; i < vars.size(); ++i) g[static_cast<Eigen::Index>(i)] = grad.values[i];
    if (!g.allFinite()) return kInf;
    return J.value();
  }
};

Eigen::VectorXd project(Eigen::VectorXd z, double b) { return z.cwiseMax(-b).cwiseMin(b); }

}  // namespace

double mpc_cost(const StateSpaceModel& model, const Eigen::VectorXd& x, double t, const Eigen::MatrixXd& inputs,
                const MpcConfig& config) {
  check_plan_shape(model, x, config);
  if (static_cast<std::size_t>(inputs.rows()) != config.steps() ||
      static_cast<std::size_t>(inputs.cols()) != model.dims().p)
    throw ConfigError("MPC input sequence has the wrong shape");
  std::vector<Eigen::VectorXd> u;
  for (Eigen::Index k = 0; k < inputs.rows(); ++k) u.push_back(inputs.row(k).transpose());
  bool ok = true;
  const double J = rollout_cost<double>(model, x, t, u, config, ok);
  return ok && std::isfinite(J) ? J : kInf;
}

Eigen::MatrixXd shift_plan(const Eigen::MatrixXd& plan) {
  if (plan.rows() < 2) return plan;
  Eigen::MatrixXd out(plan.rows(), plan.cols());
  out.topRows(plan.rows() - 1) = plan.bottomRows(plan.rows() - 1);
  out.row(plan.rows() - 1) = plan.row(plan.rows() - 1);
  return out;
}

MpcPlan mpc_plan(const StateSpaceModel& model, const Eigen::VectorXd& x, double t, const MpcConfig& config,
                 const Eigen::MatrixXd& warm) {
  check_plan_shape(model, x, config);
  const std::size_t p = model.dims().p, N = config.steps();
  const auto dim = static_cast<Eigen::Index>(N * p);
  const double b = config.u_max;

  Evaluator eval{model, x, t, config, p, {}, 0};
  Eigen::VectorXd g0;
  const double zero_cost = eval(Eigen::VectorXd::Zero(dim), g0);

  Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
  if (warm.size()) {
    if (static_cast<std::size_t>(warm.rows()) != N || static_cast<std::size_t>(warm.cols()) != p)
      throw ConfigError("MPC warm start has the wrong shape");
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t j = 0; j < p; ++j)
        z[static_cast<Eigen::Index>(k * p + j)] = warm(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
    z = project(z, b);
  }
  Eigen::VectorXd g;
  double f = warm.size() ? eval(z, g) : zero_cost;
  if (!warm.size()) g = g0;
  if (!std::isfinite(f)) {
    z.setZero();
    f = zero_cost;
    g = g0;
  }

  // Projected L-BFGS: two-loop recursion on the free variables, Armijo
  // backtracking along the projected path.
  std::deque<Eigen::VectorXd> S, Y;
  int it = 0;
  for (; it < config.iterations && std::isfinite(f); ++it) {
    Eigen::VectorXd free = Eigen::VectorXd::Ones(dim);
    for (Eigen::Index i = 0; i < dim; ++i)
      if ((z[i] <= -b && g[i] > 0.0) || (z[i] >= b && g[i] < 0.0)) free[i] = 0.0;
    const Eigen::VectorXd gf = g.cwiseProduct(free);
    if (gf.lpNorm<Eigen::Infinity>() < 1e-10) break;

    Eigen::VectorXd q = gf;
    std::vector<double> alpha(S.size());
    for (std::size_t k = S.size(); k-- > 0;) {
      const Eigen::VectorXd s = S[k].cwiseProduct(free), y = Y[k].cwiseProduct(free);
      const double sy = s.dot(y);
      if (sy <= 1e-12) continue;
      alpha[k] = s.dot(q) / sy;
      q -= alpha[k] * y;
    }
    double gamma = 1.0 / std::max(1.0, gf.lpNorm<Eigen::Infinity>());
    if (!S.empty()) {
      const Eigen::VectorXd s = S.back().cwiseProduct(free), y = Y.back().cwiseProduct(free);
      if (s.dot(y) > 1e-12) gamma = s.dot(y) / y.squaredNorm();
    }
    q *= gamma;
    for (std::size_t k = 0; k < S.size(); ++k) {
      const Eigen::VectorXd s = S[k].cwiseProduct(free), y = Y[k].cwiseProduct(free);
      const double sy = s.dot(y);
      if (sy <= 1e-12) continue;
      q += s * (alpha[k] - y.dot(q) / sy);
    }
    Eigen::VectorXd d = -q.cwiseProduct(free);
    if (d.dot(g) >= 0.0) {
      d = -gf * (1.0 / std::max(1.0, gf.lpNorm<Eigen::Infinity>()));
      S.clear();
      Y.clear();
    }

    double step = 1.0, fn = kInf;
    Eigen::VectorXd zn, gn;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls, step *= 0.5) {
      zn = project(z + step * d, b);
      fn = eval(zn, gn);
      if (std::isfinite(fn) && fn <= f + 1e-4 * g.dot(zn - z)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    const Eigen::VectorXd s = zn - z, y = gn - g;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      S.push_back(s);
      Y.push_back(y);
      if (S.size() > config.memory) {
        S.pop_front();
        Y.pop_front();
      }
    }
    const double df = f - fn;
    z = zn;
    g = gn;
    f = fn;
    if (df <= 1e-12 * std::max(1.0, std::abs(f))) {
      ++it;
      break;
    }
  }

  MpcPlan plan;
  plan.iterations = it;
  plan.zero_cost = zero_cost;
  plan.inputs.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(p));
  if (!(f <= zero_cost)) {
    plan.inputs.setZero();
    plan.cost = zero_cost;
  } else {
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t j = 0; j < p; ++j)
        plan.inputs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = z[static_cast<Eigen::Index>(k * p + j)];
    plan.cost = f;
  }
  plan.evaluations = eval.count;
  return plan;
}

// ---------------------------------------------------------------------------
// LQR
// ---------------------------------------------------------------------------

double spectral_abscissa(const Eigen::MatrixXd& A) {
  if (A.size() == 0) return -kInf;
  Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
  return es.eigenvalues().real().maxCoeff();
}

Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C) {
  const Eigen::Index n = A.rows();
  if (A.cols() != n || C.rows() != n || C.cols() != n) throw ConfigError("Lyapunov equation: shape mismatch");
  // (I kron A + A kron I) vec(X) = -vec(C), column-major vec.
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n * n, n * n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index r = j * n + i;
      for (Eigen::Index k = 0; k < n; ++k) {
        M(r, j * n + k) += A(i, k);
        M(r, k * n + i) += A(j, k);
      }
    }
  const Eigen::VectorXd rhs = -Eigen::Map<const Eigen::VectorXd>(Eigen::MatrixXd(C).data(), n * n);
  const Eigen::VectorXd v = M.fullPivLu().solve(rhs);
  Eigen::MatrixXd X = Eigen::Map<const Eigen::MatrixXd>(v.data(), n, n);
  return 0.5 * (X + X.transpose());
}

namespace {

Eigen::MatrixXd care_residual(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
                              const Eigen::MatrixXd& R, const Eigen::MatrixXd& P) {
  return A.transpose() * P + P * A - P * B * R.ldlt().solve(B.transpose() * P) + Q;
}

// Newton-Kleinman from a stabilizing K; returns {P, K}.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> newton_kleinman(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                                            const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                                                            Eigen::MatrixXd K) {
  Eigen::MatrixXd P;
  for (int it = 0; it < 100; ++it) {
    const Eigen::MatrixXd Acl = A - B * K;
    P = solve_lyapunov(Acl.transpose(), Q + K.transpose() * R * K);
    const Eigen::MatrixXd Kn = R.ldlt().solve(B.transpose() * P);
    const double change = (Kn - K).norm();
    K = Kn;
    if (change <= 1e-15 * (1.0 + K.norm())) break;
  }
  return {P, K};
}

void check_stabilizable(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const Eigen::Index n = A.rows(), m = B.cols();
  Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
  const double scale = std::max(1.0, std::max(A.norm(), B.norm()));
  for (Eigen::Index k = 0; k < n; ++k) {
    const std::complex<double> lambda = es.eigenvalues()[k];
    if (lambda.real() < -1e-9 * scale) continue;
    Eigen::MatrixXcd M(n, n + m);
    M.leftCols(n) = A.cast<std::complex<double>>() - lambda * Eigen::MatrixXcd::Identity(n, n);
    M.rightCols(m) = B.cast<std::complex<double>>();
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(M);
    if (svd.singularValues()[n - 1] < 1e-9 * scale)
      throw NotStabilizableError("(A, B) is not stabilizable: the mode at " + std::to_string(lambda.real()) +
                                 (lambda.imag() != 0.0 ? "+" + std::to_string(lambda.imag()) + "i" : "") +
                                 " is uncontrollable");
  }
}

}  // namespace

LqrSolution lqr(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Qc,
                const Eigen::MatrixXd& Rc) {
  const Eigen::Index n = A.rows(), m = B.cols();
  if (n == 0 || A.cols() != n || B.rows() != n || m == 0) throw ConfigError("LQR: A must be square and match B");
  if (Qc.rows() != n || Qc.cols() != n || Rc.rows() != m || Rc.cols() != m)
    throw ConfigError("LQR: weight matrices have the wrong shape");
  if (!A.allFinite() || !B.allFinite() || !Qc.allFinite() || !Rc.allFinite())
    throw ConfigError("LQR: matrices must be finite");
  if ((Qc - Qc.transpose()).cwiseAbs().maxCoeff() > 1e-12 || (Rc - Rc.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw ConfigError("LQR: weights must be symmetric");
  if (Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Qc).eigenvalues().minCoeff() < -1e-12)
    throw ConfigError("LQR: Qc must be positive semidefinite");
  if (!(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Rc).eigenvalues().minCoeff() > 0.0))
    throw ConfigError("LQR: Rc must be positive definite");
  check_stabilizable(A, B);

  // Stabilizing initial gain by continuation in a spectral shift: with
  // A - sigma I stable, K = 0 is stabilizing; each solved problem leaves a
  // closed-loop margin by which sigma can then be reduced.
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd Qh = Qc + I;
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m, n);
  const double abscissa = spectral_abscissa(A);
  double sigma = abscissa < 0.0 ? 0.0 : abscissa + 1.0;
  for (int round = 0; sigma > 0.0; ++round) {
    if (round > 500) throw NotStabilizableError("LQR: no stabilizing gain found");
    const Eigen::MatrixXd As = A - sigma * I;
    K = newton_kleinman(As, B, Qh, Rc, K).second;
    const double margin = -spectral_abscissa(As - B * K);
    if (!(margin > 0.0)) throw NotStabilizableError("LQR: no stabilizing gain found");
    sigma = std::max(0.0, sigma - 0.9 * margin);
  }

  auto [P, Kf] = newton_kleinman(A, B, Qc, Rc, K);
  LqrSolution sol;
  sol.P = 0.5 * (P + P.transpose());
  sol.K = Kf;
  sol.residual = care_residual(A, B, Qc, Rc, sol.P).norm();
  if (!(spectral_abscissa(A - B * sol.K) < 0.0) || !std::isfinite(sol.residual))
    throw NotStabilizableError("LQR: the Riccati equation has no stabilizing solution for these weights");
  return sol;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> linearize_dynamics(const StateSpaceModel& model, const Eigen::VectorXd& x,
                                                               const Eigen::VectorXd& u, double t) {
  const Dims d = model.dims();
  if (static_cast<std::size_t>(x.size()) != d.n || static_cast<std::size_t>(u.size()) != d.p)
    throw ConfigError("linearization point has the wrong dimension");
  ad::Tape tape;
  std::vector<Var> wrt;
  VecV xv(x.size()), uv(u.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) wrt.push_back(xv[i] = tape.input(x[i]));
  for (Eigen::Index i = 0; i < u.size(); ++i) wrt.push_back(uv[i] = tape.input(u[i]));
  const VecV f = rhs(model, xv, uv, Var(t));
  const std::vector<Var> outs(f.data(), f.data() + f.size());
  const Eigen::MatrixXd J = tape.jacobian(outs, wrt);
  return {J.leftCols(x.size()), J.rightCols(u.size())};
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

SwingUpController::SwingUpController(const StateSpaceModel& model, MpcConfig mpc, Eigen::MatrixXd Qc, double Rc,
                                     const RlLoopConfig& loop)
    : model_(&model), mpc_(std::move(mpc)), loop_(loop) {
  mpc_.validate();
  loop_.validate();
  const Dims d = model.dims();
  if (d.p == 0) throw ConfigError("controller needs a model with inputs");
  const auto n = static_cast<Eigen::Index>(d.n), p = static_cast<Eigen::Index>(d.p);
  if (Qc.size() == 0) {
    Qc = Eigen::MatrixXd::Identity(n, n);
    if (n > 2) Qc(2, 2) = 10.0;
  }
  // Gain about the upright equilibrium; the cart position reference is set
  // when the LQR engages.
  const auto [A, B] = linearize_dynamics(model, Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(p), 0.0);
  try {
    K_ = lqr(A, B, Qc, Rc * Eigen::MatrixXd::Identity(p, p)).K;
  } catch (const NotStabilizableError&) {
    K_.resize(0, 0);
  }
  u_hold_ = Eigen::VectorXd::Zero(p);
}

Eigen::VectorXd SwingUpController::act(double t, const Eigen::VectorXd& x, std::span<const double> theta_history) {
  const bool criterion = switch_criterion(theta_history, loop_.dt, loop_);
  if (!lqr_active_ && criterion && K_.size()) {
    lqr_active_ = true;
    if (!first_switch_) first_switch_ = t;
    // A frictionless cart coasting at constant speed under an upright pole
    // is an equilibrium too, so the cart keeps the velocity it has at the
    // switch instead of being braked while the pole is caught.
    x_ref_ = Eigen::VectorXd::Zero(x.size());
    x_ref_[0] = x[0];
    if (x.size() > 1) x_ref_[1] = x[1];
    t_switch_ = t;
  } else if (lqr_active_ && std::abs(wrap_angle(theta_history.back())) > std::numbers::pi / 2.0) {
    lqr_active_ = false;
    plan_.resize(0, 0);
    next_plan_ = t;
  }
  if (lqr_active_) {
    Eigen::VectorXd ref = x_ref_;
    if (ref.size() > 1) ref[0] += ref[1] * (t - t_switch_);
    Eigen::VectorXd e = x - ref;
    const auto ai = static_cast<Eigen::Index>(loop_.angle_index);
    e[ai] = wrap_angle(e[ai]);
    return (-K_ * e).cwiseMax(-mpc_.u_max).cwiseMin(mpc_.u_max);
  }
  if (next_plan_ < 0.0 || t >= next_plan_ - 1e-9) {
    const Eigen::MatrixXd warm = plan_.size() ? shift_plan(plan_) : Eigen::MatrixXd();
    plan_ = mpc_plan(*model_, x, t, mpc_, warm).inputs;
    ++plans_;
    u_hold_ = plan_.row(0).transpose();
    next_plan_ = t + mpc_.control_dt;
  }
  return u_hold_;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

EpisodeLog run_episode(const StateSpaceModel& truth, SwingUpController* controller, const Eigen::VectorXd& x0,
                       double length, const RlLoopConfig& config, std::uint64_t seed) {
  config.validate();
  const Dims d = truth.dims();
  if (static_cast<std::size_t>(x0.size()) != d.n) throw ConfigError("episode x0 has the wrong dimension");
  if (controller && d.q != d.n) throw ConfigError("state feedback needs every state measured");
  if (config.angle_index >= d.q) throw ConfigError("angle index out of range");
  const auto N = static_cast<std::size_t>(std::llround(length / config.dt));
  const auto n = static_cast<Eigen::Index>(d.n), p = static_cast<Eigen::Index>(d.p), q = static_cast<Eigen::Index>(d.q);

  const Rng root(seed);
  Rng vrng = root.split("measurement"), wrng = root.split("process");
  const dynamics::InputSignal random =
      dynamics::InputSignal::random_hold(d.p, config.random_bound, config.random_hold, length, root.split("input"));
  auto factor = [](const Eigen::MatrixXd& M) -> Eigen::MatrixXd {
    if (M.size() == 0 || M.cwiseAbs().maxCoeff() == 0.0) return {};
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  };
  const Eigen::MatrixXd Lr = factor(truth.noise().R), Lq = factor(truth.noise().Q / config.dt);
  auto normal = [](Rng& r, Eigen::Index k) {
    Eigen::VectorXd z(k);
    for (Eigen::Index i = 0; i < k; ++i) z[i] = r.normal();
    return z;
  };

  EpisodeLog ep;
  ep.kind = controller ? "mpc" : "random";
  auto& data = ep.data;
  data.inputs.resize(static_cast<Eigen::Index>(N + 1), p);
  data.measurements.resize(static_cast<Eigen::Index>(N + 1), q);
  data.states = Eigen::MatrixXd(static_cast<Eigen::Index>(N + 1), n);
  data.x0 = x0;
  data.meta.system = truth.id();
  data.meta.dt = config.dt;
  data.meta.noise_sigma = truth.noise().R.size() ? std::sqrt(truth.noise().R(0, 0)) : 0.0;
  data.meta.seed = seed;
  data.meta.system_params = dynamics::system_params(truth);

  Eigen::VectorXd x = x0;
  std::vector<double> theta;
  for (std::size_t k = 0; k <= N; ++k) {
    const double t = static_cast<double>(k) * config.dt;
    const auto r = static_cast<Eigen::Index>(k);
    Eigen::VectorXd y = truth.g0(x, Eigen::VectorXd::Zero(p), t);
    if (Lr.size()) y += Lr * normal(vrng, q);
    theta.push_back(y[static_cast<Eigen::Index>(config.angle_index)]);
    Eigen::VectorXd u = controller ? controller->act(t, y, theta) : random.at(t);
    if (controller && !ep.switch_time && controller->first_switch()) ep.switch_time = controller->first_switch();
    data.times.push_back(t);
    data.inputs.row(r) = u.transpose();
    data.measurements.row(r) = y.transpose();
    data.states->row(r) = x.transpose();
    ep.reward_to_date.push_back(reward(theta, std::min(config.reward_window, theta.size())));
    if (k == N) break;
    const Eigen::VectorXd w = Lq.size() ? Eigen::VectorXd(Lq * normal(wrng, n)) : Eigen::VectorXd::Zero(n);
    x = dynamics::step(truth, x, u, w, t, config.dt, dynamics::Method::Rk4);
    truth.project_state(x);
    if (!x.allFinite()) throw dynamics::BlowUpError(t, "true system left the finite range during an episode");
  }
  ep.reward = reward(theta, std::min(config.reward_window, theta.size()));
  return ep;
}

RlLearnerConfig default_cartpole_learner() {
  RlLearnerConfig c;
  auto& a = c.arch;
  a.n = 4;
  a.state_kind = "odenet";
  a.state_ops = "identity,sin,cos,square";
  a.state_neurons = 8;
  a.state_branches = 2;
  a.state_layers = 1;
  a.raw_time = false;
  a.output_ops = "identity";
  a.output_neurons = 4;
  a.output_prior.situation = eqlnet::Situation::Partial;
  for (std::size_t i = 0; i < 4; ++i) a.output_prior.terms.push_back({i, "x" + std::to_string(i + 1), 1.0, true});
  a.output_trainable = false;
  a.mean_fourier = 16;
  a.mean_hidden = {32};
  a.p0 = 1e-3;
  c.train.learning_rate = 3e-3;
  c.train.learning_rate_final = 1e-4;
  c.train.epochs_fit = 60;
  c.train.epochs_sparse = 20;
  c.train.batch_size = 64;
  return c;
}

namespace {

void append_segment(dynamics::Dataset& all, const dynamics::Dataset& ep) {
  if (all.size() == 0) {
    all = ep;
    return;
  }
  const double offset = all.times.back() + ep.meta.dt;
  const auto a = all.inputs.rows(), b = ep.inputs.rows();
  all.meta.segment_starts.push_back(offset + ep.times.front());
  for (double t : ep.times) all.times.push_back(offset + t);
  auto stack = [&](const Eigen::MatrixXd& top, const Eigen::MatrixXd& bottom) {
    Eigen::MatrixXd m(a + b, top.cols());
    m.topRows(a) = top;
    m.bottomRows(b) = bottom;
    return m;
  };
  all.inputs = stack(all.inputs, ep.inputs);
  all.measurements = stack(all.measurements, ep.measurements);
  if (all.states && ep.states) all.states = stack(*all.states, *ep.states);
  else all.states.reset();
}

double episode_rmse(const learner::LearnerNetworks& nets, const dynamics::Dataset& ep) {
  try {
    const auto traj = learner::simulate_identified(nets, ep, dynamics::Method::Rk4, 1, ep.x0);
    const auto clean = ep.clean_outputs();
    return dynamics::rmse(traj.outputs, clean ? *clean : ep.measurements);
  } catch (const dynamics::BlowUpError&) {
    return kInf;
  }
}

}  // namespace

RlLog run_rl_loop(const StateSpaceModel& truth, const RlLearnerConfig& learner_config, const RlLoopConfig& config,
                  const ControllerConfig& controller, std::uint64_t seed, const std::filesystem::path& out_dir) {
  config.validate();
  controller.mpc.validate();
  const Rng root(seed);
  Eigen::VectorXd x0(static_cast<Eigen::Index>(truth.dims().n));
  x0.setZero();
  if (x0.size() > static_cast<Eigen::Index>(config.angle_index))
    x0[static_cast<Eigen::Index>(config.angle_index)] = -std::numbers::pi;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  RlLog log;
  auto finish_episode = [&](EpisodeLog& ep) {
    if (!out_dir.empty()) write_episode_csv(out_dir / ("episode_" + std::to_string(ep.index) + ".csv"), ep);
  };

  EpisodeLog first = run_episode(truth, nullptr, x0, config.episode_length, config, root.split("episode").split(std::uint64_t{0}).key());
  first.index = 0;
  finish_episode(first);
  dynamics::Dataset all;
  append_segment(all, first.data);
  log.episodes.push_back(std::move(first));

  std::optional<learner::LearnerNetworks> model;
  for (std::size_t e = 1; e <= config.max_episodes; ++e) {
    std::string note;
    bool failed = false;
    std::string checkpoint;
    if (!config.oracle) {
      learner::ArchitectureConfig arch = learner_config.arch;
      arch.n = truth.dims().n;
      auto nets = learner::build_networks(arch, all, root.split("learner").split(static_cast<std::uint64_t>(e)).key());
      if (model) {
        nets.model.state().params() = model->model.state().params();
        nets.model.output().params() = model->model.output().params();
      }
      learner::TrainConfig tc = learner_config.train;
      tc.seed = root.split("train").split(static_cast<std::uint64_t>(e)).key();
      const auto rep = learner::train(nets, all, tc);
      if (rep.diverged) {
        failed = true;
        note = "training diverged: " + rep.divergence_message;
      } else {
        model = std::move(nets);
      }
      if (!model) {
        // Nothing usable yet: keep exploring with random input.
        EpisodeLog ep = run_episode(truth, nullptr, x0, config.episode_length, config,
                                    root.split("episode").split(static_cast<std::uint64_t>(e)).key());
        ep.index = e;
        ep.training_failed = true;
        ep.note = note;
        finish_episode(ep);
        append_segment(all, ep.data);
        log.episodes.push_back(std::move(ep));
        continue;
      }
      if (!out_dir.empty()) {
        checkpoint = (out_dir / ("model_" + std::to_string(e) + ".json")).string();
        learner::save_checkpoint(checkpoint, *model);
      }
    }
    const StateSpaceModel& plant_model = config.oracle ? truth : static_cast<const StateSpaceModel&>(model->model);
    EpisodeLog ep;
    try {
      SwingUpController ctrl(plant_model, controller.mpc, controller.Qc, controller.Rc, config);
      ep = run_episode(truth, &ctrl, x0, config.episode_length, config, root.split("episode").split(static_cast<std::uint64_t>(e)).key());
      if (!ctrl.gain().size()) note += (note.empty() ? "" : "; ") + std::string("model not stabilizable at upright");
    } catch (const std::exception& ex) {
      // Unusable model: fall back to a random episode so data still accrues.
      ep = run_episode(truth, nullptr, x0, config.episode_length, config, root.split("episode").split(static_cast<std::uint64_t>(e)).key());
      note += (note.empty() ? "" : "; ") + std::string("controller failed: ") + ex.what();
      failed = true;
    }
    ep.index = e;
    ep.training_failed = failed;
    ep.note = note;
    ep.checkpoint = checkpoint;
    if (model && !config.oracle) ep.model_rmse = episode_rmse(*model, ep.data);
    finish_episode(ep);
    append_segment(all, ep.data);
    const bool stable = ep.reward > config.stable_threshold;
    log.episodes.push_back(std::move(ep));
    if (stable) {
      log.success = true;
      log.success_episode = e;
      break;
    }
  }
  if (!out_dir.empty()) {
    std::ofstream out(out_dir / "summary.json", std::ios::binary);
    out << summary_json(log).dump(2) << "\n";
  }
  return log;
}

void write_episode_csv(const std::filesystem::path& path, const EpisodeLog& ep) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  const auto& d = ep.data;
  const auto p = d.inputs.cols();
  const auto n = d.states ? d.states->cols() : 0;
  out << "t";
  for (Eigen::Index i = 0; i < p; ++i) out << ",u_" << i + 1;
  for (Eigen::Index i = 0; i < n; ++i) out << ",x_" << i + 1;
  out << ",reward\n";
  for (std::size_t k = 0; k < d.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    out << dynamics::format_double(d.times[k]);
    for (Eigen::Index i = 0; i < p; ++i) out << ',' << dynamics::format_double(d.inputs(r, i));
    for (Eigen::Index i = 0; i < n; ++i) out << ',' << dynamics::format_double((*d.states)(r, i));
    out << ',' << dynamics::format_double(ep.reward_to_date[k]) << "\n";
  }
}

nlohmann::json summary_json(const RlLog& log) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& ep : log.episodes) {
    nlohmann::json j = {{"episode", ep.index},
                        {"kind", ep.kind},
                        {"reward", ep.reward},
                        {"switch_time", ep.switch_time ? nlohmann::json(*ep.switch_time) : nlohmann::json(nullptr)},
                        {"model_rmse", std::isfinite(ep.model_rmse) ? nlohmann::json(ep.model_rmse)
                                                                   : nlohmann::json(nullptr)},
                        {"checkpoint", ep.checkpoint},
                        {"training_failed", ep.training_failed}};
    if (!ep.note.empty()) j["note"] = ep.note;
    eps.push_back(std::move(j));
  }
  return {{"success", log.success},
          {"success_episode", log.success_episode ? nlohmann::json(*log.success_episode) : nlohmann::json(nullptr)},
          {"episodes", eps}};
}

}  // namespace odelearn::control
