#include "odelearn/ekbf.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace odelearn::ekbf {

namespace {

void check_noise_shapes(const StateSpaceModel& model, const NoiseModel& noise) {
  const Dims d = model.dims();
  if (static_cast<std::size_t>(noise.Q.rows()) != d.n || static_cast<std::size_t>(noise.Q.cols()) != d.n ||
      static_cast<std::size_t>(noise.R.rows()) != d.q || static_cast<std::size_t>(noise.R.cols()) != d.q)
    throw FilterConfigError("noise covariances do not match the model dimensions");
}

void check_rhat(const Eigen::MatrixXd& Rhat) {
  Eigen::LLT<Eigen::MatrixXd> llt(Rhat);
  if (Rhat.size() == 0 || llt.info() != Eigen::Success) throw FilterConfigError("measurement covariance Rhat is singular");
}

std::vector<Var> as_span(const VecV& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

LinearizedSystem linearize(const StateSpaceModel& model, const Eigen::VectorXd& xhat, const Eigen::VectorXd& u,
                           double t, const NoiseModel& noise) {
  check_noise_shapes(model, noise);
  const Dims d = model.dims();
  ad::Tape tape;
  const auto n = static_cast<Eigen::Index>(d.n), q = static_cast<Eigen::Index>(d.q);
  VecV x(n), w(n), v(q);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = tape.input(xhat[i]);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = tape.input(0.0);
  for (Eigen::Index i = 0; i < q; ++i) v[i] = tape.input(0.0);
  const VecV uv = to_scalar<Var>(u);
  const VecV fx = model.f(x, uv, w, Var(t));
  const VecV gx = model.g(x, uv, v, Var(t));
  const auto fo = as_span(fx), go = as_span(gx), xs = as_span(x), ws = as_span(w), vs = as_span(v);

  LinearizedSystem lin;
  lin.A = tape.jacobian(fo, xs);
  lin.G = tape.jacobian(fo, ws);
  lin.C = tape.jacobian(go, xs);
  lin.V = tape.jacobian(go, vs);
  lin.Qhat = lin.G * noise.Q * lin.G.transpose();
  lin.Rhat = lin.V * noise.R * lin.V.transpose();
  check_rhat(lin.Rhat);
  return lin;
}

Linearization<Var> linearize_graph(ad::Tape& tape, const StateSpaceModel& model, const VecV& xhat, const VecV& u,
                                   const Var& t, const NoiseModel& noise) {
  check_noise_shapes(model, noise);
  const Dims d = model.dims();
  const auto n = static_cast<Eigen::Index>(d.n), q = static_cast<Eigen::Index>(d.q);
  VecV x = xhat, w(n), v(q);
  for (Eigen::Index i = 0; i < n; ++i)
    if (x[i].is_constant()) x[i] = tape.constant(x[i].value());
  for (Eigen::Index i = 0; i < n; ++i) w[i] = tape.constant(0.0);
  for (Eigen::Index i = 0; i < q; ++i) v[i] = tape.constant(0.0);
  const VecV fx = model.f(x, u, w, t);
  const VecV gx = model.g(x, u, v, t);
  const auto fo = as_span(fx), go = as_span(gx), xs = as_span(x), ws = as_span(w), vs = as_span(v);

  Linearization<Var> lin;
  lin.A = tape.jacobian_graph(fo, xs);
  lin.G = tape.jacobian_graph(fo, ws);
  lin.C = tape.jacobian_graph(go, xs);
  lin.V = tape.jacobian_graph(go, vs);
  const MatV Q = noise.Q.cast<Var>();
  const MatV R = noise.R.cast<Var>();
  lin.Qhat = lin.G * Q * lin.G.transpose();
  lin.Rhat = lin.V * R * lin.V.transpose();
  check_rhat(values_of(lin.Rhat));
  return lin;
}

void condition_covariance(Eigen::MatrixXd& P) {
  P = 0.5 * (P + P.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P);
  if (es.info() != Eigen::Success) return;
  if (es.eigenvalues().minCoeff() >= 0.0) return;
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0);
  P = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
  P = 0.5 * (P + P.transpose()).eval();
}

namespace {

struct Derivative {
  Eigen::VectorXd dx;
  Eigen::MatrixXd dP;
};

Derivative joint_rhs(const StateSpaceModel& model, const Eigen::VectorXd& x, const Eigen::MatrixXd& P,
                     const Eigen::VectorXd& u, const Eigen::VectorXd& y, double t, const NoiseModel& noise) {
  const LinearizedSystem lin = linearize(model, x, u, t, noise);
  const Eigen::MatrixXd K = kalman_gain<double>(P, lin.C, lin.Rhat);
  return {mean_rhs<double>(model, x, u, y, K, t), cov_rhs<double>(lin.A, P, K, lin.C, lin.Qhat)};
}

void check_divergence(const Eigen::VectorXd& x, const Eigen::MatrixXd& P, double t) {
  const double pn = P.cwiseAbs().rowwise().sum().maxCoeff();
  if (!std::isfinite(pn) || pn > kDivergenceLimit || !x.allFinite() ||
      x.cwiseAbs().maxCoeff() > dynamics::kBlowUpLimit) {
    std::ostringstream os;
    os << "filter diverged at t = " << t;
    throw DivergenceError(t, os.str());
  }
}

}  // namespace

std::vector<FilterState> run_filter(const StateSpaceModel& model, const dynamics::Dataset& data,
                                    const Eigen::VectorXd& x0, Eigen::MatrixXd P0, const FilterConfig& config) {
  data.validate();
  const Dims d = model.dims();
  const auto n = static_cast<Eigen::Index>(d.n);
  if (x0.size() != n) throw FilterConfigError("initial mean has the wrong dimension");
  if (P0.size() == 0) P0 = 0.1 * Eigen::MatrixXd::Identity(n, n);
  if (P0.rows() != n || P0.cols() != n) throw FilterConfigError("initial covariance has the wrong dimension");
  if (data.output_dim() != d.q || data.input_dim() != d.p)
    throw FilterConfigError("dataset dimensions do not match the model");
  const NoiseModel& noise = model.noise();

  Eigen::VectorXd x = x0;
  Eigen::MatrixXd P = P0;
  condition_covariance(P);
  const std::size_t N = data.size();
  std::vector<FilterState> out;
  out.reserve(N);
  for (std::size_t k = 0; k < N; ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const double t = data.times[k];
    const Eigen::VectorXd u = data.inputs.row(r).transpose();
    const Eigen::VectorXd y = data.measurements.row(r).transpose();
    const LinearizedSystem lin = linearize(model, x, u, t, noise);

    FilterState s;
    s.t = t;
    s.xhat = x;
    s.P = P;
    s.K = kalman_gain<double>(P, lin.C, lin.Rhat);
    s.innovation = y - model.g0(x, u, t);
    const double dt = k + 1 < N ? data.times[k + 1] - t : (k > 0 ? t - data.times[k - 1] : 1.0);
    s.S = lin.C * P * lin.C.transpose() + lin.Rhat / dt;
    const Eigen::MatrixXd KC = s.K * lin.C;
    out.push_back(std::move(s));
    if (k + 1 == N) break;

    const double rate = std::max(lin.A.cwiseAbs().rowwise().sum().maxCoeff(), KC.cwiseAbs().rowwise().sum().maxCoeff());
    const int m = std::clamp(static_cast<int>(std::ceil(dt * rate / config.stiffness_bound)),
                             std::max(config.substeps, 1), std::max(config.max_substeps, config.substeps));
    const double h = dt / m;
    for (int s_i = 0; s_i < m; ++s_i) {
      const double ts = t + s_i * h;
      if (config.method == dynamics::Method::Euler) {
        const auto k1 = joint_rhs(model, x, P, u, y, ts, noise);
        x += h * k1.dx;
        P += h * k1.dP;
      } else {
        const auto k1 = joint_rhs(model, x, P, u, y, ts, noise);
        const auto k2 = joint_rhs(model, x + 0.5 * h * k1.dx, P + 0.5 * h * k1.dP, u, y, ts + 0.5 * h, noise);
        const auto k3 = joint_rhs(model, x + 0.5 * h * k2.dx, P + 0.5 * h * k2.dP, u, y, ts + 0.5 * h, noise);
        const auto k4 = joint_rhs(model, x + h * k3.dx, P + h * k3.dP, u, y, ts + h, noise);
        x += h / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx);
        P += h / 6.0 * (k1.dP + 2.0 * k2.dP + 2.0 * k3.dP + k4.dP);
      }
      condition_covariance(P);
      model.project_state(x);
      check_divergence(x, P, ts + h);
    }
  }
  return out;
}

}  // namespace odelearn::ekbf
