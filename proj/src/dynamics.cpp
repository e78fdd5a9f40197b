#include "odelearn/dynamics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace odelearn {

NoiseModel NoiseModel::diagonal(const Eigen::VectorXd& q_diag, const Eigen::VectorXd& r_diag) {
  return {q_diag.asDiagonal(), r_diag.asDiagonal()};
}

void NoiseModel::validate() const {
  auto check_sym = [](const Eigen::MatrixXd& M, const char* name) {
    if (M.rows() != M.cols()) throw ConfigError(std::string(name) + " must be square");
    if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ConfigError(std::string(name) + " is not symmetric");
  };
  check_sym(Q, "Q");
  check_sym(R, "R");
  if (Q.size() > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
    if (es.eigenvalues().minCoeff() < -1e-12) throw ConfigError("Q is not positive semi-definite");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(R);
  if (llt.info() != Eigen::Success || R.size() == 0) throw ConfigError("R is not positive definite");
}

void StateSpaceModel::set_noise(NoiseModel noise) {
  const Dims d = dims();
  if (static_cast<std::size_t>(noise.Q.rows()) != d.n || static_cast<std::size_t>(noise.R.rows()) != d.q)
    throw ConfigError("noise model dimensions do not match the state-space model");
  noise_ = std::move(noise);
}

}  // namespace odelearn

namespace odelearn::dynamics {

// --- systems ----------------------------------------------------------------

Duffing::Duffing(Params params, double sigma_v) : params_(params) {
  noise_ = {Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Constant(1, 1, sigma_v * sigma_v)};
}

DuffingScenario sample_duffing_scenario(Rng& rng) {
  DuffingScenario s;
  const double c1 = rng.uniform(), c2 = rng.uniform(), c3 = rng.uniform(), c4 = rng.uniform();
  s.params.b = {-c1, -c2, -c3, c4};
  s.params.omega0 = rng.uniform();
  s.x0 = Eigen::Vector2d(rng.uniform(), rng.uniform());
  return s;
}

CascadedTank::CascadedTank(Params params, double sigma_v, double sigma_w) : params_(params) {
  for (double k : params_.k)
    if (!(k > 0.0)) throw ConfigError("cascaded tank coefficients must be positive");
  noise_ = {Eigen::MatrixXd::Identity(2, 2) * sigma_w * sigma_w, Eigen::MatrixXd::Constant(1, 1, sigma_v * sigma_v)};
}

void CascadedTank::project_state(Eigen::VectorXd& x) const {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x[i] = std::max(x[i], 0.0);
    if (params_.max_level > 0.0) x[i] = std::min(x[i], params_.max_level);
  }
}

CartPole::CartPole(Params params, double sigma_v, double sigma_w) : params_(params) {
  if (params_.cart_mass <= 0 || params_.pole_mass <= 0 || params_.length <= 0 || params_.gravity <= 0)
    throw ConfigError("cart-pole parameters must be positive");
  noise_ = {Eigen::MatrixXd::Identity(4, 4) * sigma_w * sigma_w, Eigen::MatrixXd::Identity(4, 4) * sigma_v * sigma_v};
}

double CartPole::energy(const Eigen::VectorXd& x) const {
  const auto& P = params_;
  const double v = x[1], th = x[2], w = x[3];
  const double kin = 0.5 * (P.cart_mass + P.pole_mass) * v * v + P.pole_mass * P.length * v * w * std::cos(th) +
                     0.5 * (4.0 / 3.0) * P.pole_mass * P.length * P.length * w * w;
  return kin + P.pole_mass * P.gravity * P.length * std::cos(th);
}

LinearModel::LinearModel(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C, Eigen::MatrixXd G,
                         Eigen::MatrixXd D)
    : A_(std::move(A)), B_(std::move(B)), C_(std::move(C)), G_(std::move(G)), D_(std::move(D)) {
  const auto n = A_.rows();
  if (A_.cols() != n || C_.cols() != n) throw ConfigError("linear model: inconsistent dimensions");
  if (B_.size() == 0) B_.resize(n, 0);
  if (G_.size() == 0) G_ = Eigen::MatrixXd::Identity(n, n);
  if (D_.size() == 0) D_.resize(C_.rows(), 0);
  noise_ = {Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Identity(C_.rows(), C_.rows())};
}

Dims LinearModel::dims() const {
  return {static_cast<std::size_t>(A_.rows()), static_cast<std::size_t>(B_.cols()),
          static_cast<std::size_t>(C_.rows())};
}

namespace {

void reject_unknown_keys(const nlohmann::json& params, const std::set<std::string>& allowed, const std::string& who) {
  if (params.is_null()) return;
  if (!params.is_object()) throw ConfigError(who + ": parameters must be an object");
  for (const auto& [key, _] : params.items())
    if (!allowed.count(key)) throw ConfigError(who + ": unknown parameter '" + key + "'");
}

template <std::size_t N>
std::array<double, N> read_array(const nlohmann::json& j, const char* key, std::array<double, N> fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N) throw ConfigError(std::string("parameter '") + key + "' needs " + std::to_string(N) + " values");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = a.at(i).get<double>();
  return out;
}

double read(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return j.at(key).get<double>();
}

}  // namespace

std::unique_ptr<StateSpaceModel> make_system(const std::string& id, const nlohmann::json& params) {
  if (id == "duffing") {
    reject_unknown_keys(params, {"b", "omega0", "sigma_v"}, id);
    Duffing::Params p;
    p.b = read_array(params, "b", p.b);
    p.omega0 = read(params, "omega0", p.omega0);
    return std::make_unique<Duffing>(p, read(params, "sigma_v", 0.0));
  }
  if (id == "cascaded_tank") {
    reject_unknown_keys(params, {"k", "pump_gain", "sensor_gain", "sensor_offset", "max_level", "sigma_v", "sigma_w"}, id);
    CascadedTank::Params p;
    p.k = read_array(params, "k", p.k);
    p.pump_gain = read(params, "pump_gain", p.pump_gain);
    p.sensor_gain = read(params, "sensor_gain", p.sensor_gain);
    p.sensor_offset = read(params, "sensor_offset", p.sensor_offset);
    p.max_level = read(params, "max_level", p.max_level);
    return std::make_unique<CascadedTank>(p, read(params, "sigma_v", 0.0), read(params, "sigma_w", 0.0));
  }
  if (id == "cartpole") {
    reject_unknown_keys(params, {"cart_mass", "pole_mass", "length", "gravity", "force_limit", "sigma_v", "sigma_w"}, id);
    CartPole::Params p;
    p.cart_mass = read(params, "cart_mass", p.cart_mass);
    p.pole_mass = read(params, "pole_mass", p.pole_mass);
    p.length = read(params, "length", p.length);
    p.gravity = read(params, "gravity", p.gravity);
    p.force_limit = read(params, "force_limit", p.force_limit);
    return std::make_unique<CartPole>(p, read(params, "sigma_v", 0.0), read(params, "sigma_w", 0.0));
  }
  throw ConfigError("unknown system '" + id + "'");
}

nlohmann::json system_params(const StateSpaceModel& model) {
  const double sv = model.noise().R.size() ? std::sqrt(model.noise().R(0, 0)) : 0.0;
  const double sw = model.noise().Q.size() ? std::sqrt(model.noise().Q(0, 0)) : 0.0;
  if (auto* d = dynamic_cast<const Duffing*>(&model)) {
    return {{"b", d->params().b}, {"omega0", d->params().omega0}, {"sigma_v", sv}};
  }
  if (auto* c = dynamic_cast<const CascadedTank*>(&model)) {
    const auto& p = c->params();
    return {{"k", p.k},
            {"pump_gain", p.pump_gain},
            {"sensor_gain", p.sensor_gain},
            {"sensor_offset", p.sensor_offset},
            {"max_level", p.max_level},
            {"sigma_v", sv},
            {"sigma_w", sw}};
  }
  if (auto* c = dynamic_cast<const CartPole*>(&model)) {
    const auto& p = c->params();
    return {{"cart_mass", p.cart_mass}, {"pole_mass", p.pole_mass}, {"length", p.length},
            {"gravity", p.gravity},     {"force_limit", p.force_limit}, {"sigma_v", sv},
            {"sigma_w", sw}};
  }
  return nlohmann::json::object();
}

// --- input signals ------------------------------------------------------------

InputSignal InputSignal::zero(std::size_t p) { return constant(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p))); }

InputSignal InputSignal::constant(Eigen::VectorXd level) {
  InputSignal s;
  s.kind_ = Kind::Constant;
  s.p_ = static_cast<std::size_t>(level.size());
  s.level_ = std::move(level);
  return s;
}

InputSignal InputSignal::multisine(std::size_t p, double offset, double amplitude, std::vector<double> omegas,
                                   Rng rng) {
  if (omegas.empty()) throw ConfigError("multisine needs at least one frequency");
  InputSignal s;
  s.kind_ = Kind::Multisine;
  s.p_ = p;
  s.offset_ = offset;
  s.amplitude_ = amplitude;
  s.omegas_ = std::move(omegas);
  s.phases_.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(s.omegas_.size()));
  for (Eigen::Index i = 0; i < s.phases_.rows(); ++i)
    for (Eigen::Index k = 0; k < s.phases_.cols(); ++k) s.phases_(i, k) = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return s;
}

InputSignal InputSignal::random_hold(std::size_t p, double bound, double hold, double t_end, Rng rng, double offset) {
  if (!(hold > 0.0)) throw ConfigError("random-hold period must be positive");
  InputSignal s;
  s.kind_ = Kind::RandomHold;
  s.p_ = p;
  s.hold_ = hold;
  const auto segments = static_cast<Eigen::Index>(std::floor(t_end / hold)) + 1;
  s.values_.resize(segments, static_cast<Eigen::Index>(p));
  for (Eigen::Index k = 0; k < segments; ++k)
    for (Eigen::Index i = 0; i < s.values_.cols(); ++i) s.values_(k, i) = offset + rng.uniform(-bound, bound);
  return s;
}

InputSignal InputSignal::samples(std::vector<double> times, Eigen::MatrixXd values) {
  if (times.size() != static_cast<std::size_t>(values.rows())) throw ConfigError("input samples: length mismatch");
  InputSignal s;
  s.kind_ = Kind::Samples;
  s.p_ = static_cast<std::size_t>(values.cols());
  s.times_ = std::move(times);
  s.values_ = std::move(values);
  return s;
}

Eigen::VectorXd InputSignal::at(double t) const {
  switch (kind_) {
    case Kind::Constant:
      return level_;
    case Kind::Multisine: {
      Eigen::VectorXd u = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(p_), offset_);
      const double scale = amplitude_ / std::sqrt(static_cast<double>(omegas_.size()));
      for (Eigen::Index i = 0; i < u.size(); ++i)
        for (std::size_t k = 0; k < omegas_.size(); ++k)
          u[i] += scale * std::sin(omegas_[k] * t + phases_(i, static_cast<Eigen::Index>(k)));
      return u;
    }
    case Kind::RandomHold: {
      auto k = static_cast<Eigen::Index>(std::floor(t / hold_ + 1e-9));
      k = std::clamp<Eigen::Index>(k, 0, values_.rows() - 1);
      return values_.row(k).transpose();
    }
    case Kind::Samples: {
      if (times_.empty()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p_));
      auto it = std::upper_bound(times_.begin(), times_.end(), t + 1e-12);
      const auto k = it == times_.begin() ? 0 : static_cast<Eigen::Index>(it - times_.begin() - 1);
      return values_.row(k).transpose();
    }
  }
  return {};
}

InputSignal InputSpec::build(std::size_t p, double t_end, Rng rng) const {
  if (kind == "constant") return InputSignal::constant(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(p), level));
  if (kind == "multisine") return InputSignal::multisine(p, level, amplitude, omegas, rng);
  if (kind == "random_hold") return InputSignal::random_hold(p, bound, hold, t_end, rng, level);
  throw ConfigError("unknown input signal kind '" + kind + "'");
}

// --- integration --------------------------------------------------------------

Method parse_method(const std::string& name) {
  if (name == "euler") return Method::Euler;
  if (name == "rk4") return Method::Rk4;
  throw ConfigError("unknown integrator '" + name + "'");
}

std::string method_name(Method m) { return m == Method::Euler ? "euler" : "rk4"; }

BlowUpError::BlowUpError(double t, const std::string& what) : std::runtime_error(what), time_(t) {}

Eigen::VectorXd step(const StateSpaceModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     const Eigen::VectorXd& w, double t, double dt, Method method) {
  if (method == Method::Euler) return x + dt * model.f(x, u, w, t);
  const Eigen::VectorXd k1 = model.f(x, u, w, t);
  const Eigen::VectorXd k2 = model.f(x + 0.5 * dt * k1, u, w, t + 0.5 * dt);
  const Eigen::VectorXd k3 = model.f(x + 0.5 * dt * k2, u, w, t + 0.5 * dt);
  const Eigen::VectorXd k4 = model.f(x + dt * k3, u, w, t + dt);
  return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& M) {
  if (M.size() == 0) return M;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal();
}

Eigen::VectorXd draw_normal(Rng& rng, Eigen::Index n) {
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
  return z;
}

void check_finite(const Eigen::VectorXd& x, double t) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || std::abs(x[i]) > kBlowUpLimit) {
      std::ostringstream os;
      os << "state blow-up at t = " << t;
      throw BlowUpError(t, os.str());
    }
  }
}

}  // namespace

Trajectory integrate(const StateSpaceModel& model, const Eigen::VectorXd& x0, const InputSignal& input,
                     double t_end, double dt, Method method, std::optional<std::uint64_t> noise_seed) {
  if (!(dt > 0.0)) throw ConfigError("integration step must be positive");
  const Dims d = model.dims();
  if (static_cast<std::size_t>(x0.size()) != d.n) throw ConfigError("initial state has the wrong dimension");
  if (input.dim() != d.p) throw ConfigError("input signal has the wrong dimension");
  const auto steps = static_cast<Eigen::Index>(std::llround(t_end / dt));
  const Eigen::Index N = steps + 1;
  const auto n = static_cast<Eigen::Index>(d.n), p = static_cast<Eigen::Index>(d.p), q = static_cast<Eigen::Index>(d.q);

  Trajectory tr;
  tr.times.resize(static_cast<std::size_t>(N));
  tr.states.resize(N, n);
  tr.inputs.resize(N, p);
  tr.outputs.resize(N, q);

  std::optional<Rng> proc, meas;
  Eigen::MatrixXd Lq, Lr;
  if (noise_seed) {
    Rng root(*noise_seed);
    proc = root.split("process-noise");
    meas = root.split("measurement-noise");
    Lq = psd_sqrt(model.noise().Q);
    Lr = psd_sqrt(model.noise().R);
  }
  const bool has_q = noise_seed && Lq.size() > 0 && Lq.cwiseAbs().maxCoeff() > 0.0;
  const bool has_r = noise_seed && Lr.size() > 0 && Lr.cwiseAbs().maxCoeff() > 0.0;

  Eigen::VectorXd x = x0;
  const Eigen::VectorXd w0 = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd v0 = Eigen::VectorXd::Zero(q);
  for (Eigen::Index k = 0; k < N; ++k) {
    const double t = static_cast<double>(k) * dt;
    const Eigen::VectorXd u = input.at(t);
    tr.times[static_cast<std::size_t>(k)] = t;
    tr.states.row(k) = x.transpose();
    tr.inputs.row(k) = u.transpose();
    const Eigen::VectorXd v = has_r ? Eigen::VectorXd(Lr * draw_normal(*meas, q)) : v0;
    tr.outputs.row(k) = model.g(x, u, v, t).transpose();
    if (k + 1 == N) break;
    const Eigen::VectorXd w = has_q ? Eigen::VectorXd(Lq * draw_normal(*proc, n) / std::sqrt(dt)) : w0;
    x = step(model, x, u, w, t, dt, method);
    model.project_state(x);
    check_finite(x, t + dt);
  }
  return tr;
}

Trajectory simulate(const StateSpaceModel& model, const Eigen::VectorXd& x0, const std::vector<double>& times,
                    const Eigen::MatrixXd& inputs, Method method, int substeps) {
  const Dims d = model.dims();
  const auto N = static_cast<Eigen::Index>(times.size());
  if (inputs.rows() != N || static_cast<std::size_t>(inputs.cols()) != d.p)
    throw ConfigError("simulate: input samples do not match the time grid");
  if (static_cast<std::size_t>(x0.size()) != d.n) throw ConfigError("simulate: initial state has the wrong dimension");
  substeps = std::max(substeps, 1);
  Trajectory tr;
  tr.times = times;
  tr.states.resize(N, static_cast<Eigen::Index>(d.n));
  tr.inputs = inputs;
  tr.outputs.resize(N, static_cast<Eigen::Index>(d.q));
  const Eigen::VectorXd w0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.n));
  Eigen::VectorXd x = x0;
  for (Eigen::Index k = 0; k < N; ++k) {
    const double t = times[static_cast<std::size_t>(k)];
    const Eigen::VectorXd u = inputs.row(k).transpose();
    tr.states.row(k) = x.transpose();
    tr.outputs.row(k) = model.g0(x, u, t).transpose();
    if (k + 1 == N) break;
    const double h = (times[static_cast<std::size_t>(k + 1)] - t) / substeps;
    for (int s = 0; s < substeps; ++s) {
      x = step(model, x, u, w0, t + s * h, h, method);
      model.project_state(x);
    }
    check_finite(x, times[static_cast<std::size_t>(k + 1)]);
  }
  return tr;
}

// --- datasets ----------------------------------------------------------------

void Dataset::validate() const {
  const auto N = static_cast<Eigen::Index>(times.size());
  if (N == 0) throw ConfigError("dataset is empty");
  if (inputs.rows() != N || measurements.rows() != N) throw ConfigError("dataset columns have different lengths");
  if (states && states->rows() != N) throw ConfigError("dataset state columns have the wrong length");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw ConfigError("dataset times are not strictly increasing");
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw ConfigError("dataset slice out of range");
  Dataset out;
  const auto b = static_cast<Eigen::Index>(begin), len = static_cast<Eigen::Index>(end - begin);
  out.times.assign(times.begin() + static_cast<std::ptrdiff_t>(begin), times.begin() + static_cast<std::ptrdiff_t>(end));
  out.inputs = inputs.middleRows(b, len);
  out.measurements = measurements.middleRows(b, len);
  if (states) {
    out.states = states->middleRows(b, len);
    if (len > 0) out.x0 = Eigen::VectorXd(states->row(b).transpose());
  } else if (begin == 0) {
    out.x0 = x0;
  }
  out.meta = meta;
  out.meta.segment_starts.clear();
  for (double t : meta.segment_starts)
    if (len > 0 && t > out.times.front() && t <= out.times.back()) out.meta.segment_starts.push_back(t);
  return out;
}

Dataset Dataset::decimate(std::size_t stride) const {
  if (stride == 0) throw ConfigError("decimation stride must be positive");
  Dataset out;
  const auto N = static_cast<Eigen::Index>(size() == 0 ? 0 : (size() - 1) / stride + 1);
  const auto S = static_cast<Eigen::Index>(stride);
  out.inputs.resize(N, inputs.cols());
  out.measurements.resize(N, measurements.cols());
  if (states) out.states = Eigen::MatrixXd(N, states->cols());
  for (Eigen::Index k = 0; k < N; ++k) {
    out.times.push_back(times[static_cast<std::size_t>(k * S)]);
    out.inputs.row(k) = inputs.row(k * S);
    out.measurements.row(k) = measurements.row(k * S);
    if (states) out.states->row(k) = states->row(k * S);
  }
  out.x0 = x0;
  out.meta = meta;
  out.meta.dt = meta.dt * static_cast<double>(stride);
  return out;
}

std::optional<Eigen::MatrixXd> Dataset::clean_outputs() const {
  if (!states || meta.system.empty()) return std::nullopt;
  std::unique_ptr<StateSpaceModel> sys;
  try {
    sys = make_system(meta.system, meta.system_params);
  } catch (const ConfigError&) {
    return std::nullopt;
  }
  const Dims d = sys->dims();
  if (static_cast<std::size_t>(states->cols()) != d.n) return std::nullopt;
  Eigen::MatrixXd y(states->rows(), static_cast<Eigen::Index>(d.q));
  for (Eigen::Index k = 0; k < y.rows(); ++k)
    y.row(k) = sys->g0(states->row(k).transpose(), inputs.row(k).transpose(), times[static_cast<std::size_t>(k)]).transpose();
  return y;
}

std::pair<std::size_t, std::size_t> select_window(const Dataset& data, const std::string& spec) {
  const std::size_t N = data.size();
  if (N == 0) return {0, 0};
  const double t0 = data.times.front(), t1 = data.times.back();
  const double tol = 1e-9 * std::max(1.0, std::abs(t1));
  auto parse_seconds = [&](std::string s) {
    if (s.empty() || s.back() != 's') throw ConfigError("bad window spec '" + spec + "'");
    s.pop_back();
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("bad window spec '" + spec + "'");
    return v;
  };
  double from = t0 - 1.0, to = t1 + 1.0;
  if (spec == "all") {
    return {0, N};
  } else if (spec.rfind("first", 0) == 0) {
    to = t0 + parse_seconds(spec.substr(5)) - tol;
  } else if (spec.rfind("last", 0) == 0) {
    from = t1 - parse_seconds(spec.substr(4)) - tol;
  } else if (spec.rfind("range:", 0) == 0) {
    const auto rest = spec.substr(6);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw ConfigError("bad window spec '" + spec + "'");
    from = std::stod(rest.substr(0, colon)) - tol;
    to = std::stod(rest.substr(colon + 1)) - tol;
  } else {
    throw ConfigError("bad window spec '" + spec + "'");
  }
  std::size_t b = 0;
  while (b < N && data.times[b] < from) ++b;
  std::size_t e = b;
  while (e < N && data.times[e] < to) ++e;
  return {b, e};
}

Dataset synthesize(const StateSpaceModel& model, const Eigen::VectorXd& x0, const InputSignal& input, double t_end,
                   double dt, std::uint64_t seed, Method method) {
  const Trajectory tr = integrate(model, x0, input, t_end, dt, method, seed);
  Dataset data;
  data.times = tr.times;
  data.inputs = tr.inputs;
  data.measurements = tr.outputs;
  data.states = tr.states;
  data.x0 = x0;
  data.meta.system = model.id();
  data.meta.dt = dt;
  data.meta.noise_sigma = model.noise().R.size() ? std::sqrt(model.noise().R(0, 0)) : 0.0;
  data.meta.seed = seed;
  data.meta.system_params = system_params(model);
  return data;
}

double rmse(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& reference) {
  if (predicted.rows() != reference.rows() || predicted.cols() != reference.cols())
    throw std::invalid_argument("rmse: shape mismatch");
  if (predicted.rows() == 0) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((predicted - reference).squaredNorm() / static_cast<double>(predicted.rows()));
}

double dominant_frequency(const Dataset& data, std::size_t channel, double lo, double hi, double step) {
  if (channel >= data.output_dim()) throw ConfigError("dominant_frequency: no such channel");
  if (!(lo > 0.0 && hi >= lo && step > 0.0)) throw ConfigError("dominant_frequency: need 0 < lo <= hi and step > 0");
  if (data.size() < 2) throw ConfigError("dominant_frequency: need at least two samples");
  const Eigen::VectorXd y =
      data.measurements.col(static_cast<Eigen::Index>(channel)).array() - data.measurements.col(static_cast<Eigen::Index>(channel)).mean();
  double best = lo, best_power = -1.0;
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  for (std::size_t i = 0; i < count; ++i) {
    const double w = lo + static_cast<double>(i) * step;
    double c = 0.0, s = 0.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      c += y[static_cast<Eigen::Index>(k)] * std::cos(w * data.times[k]);
      s += y[static_cast<Eigen::Index>(k)] * std::sin(w * data.times[k]);
    }
    if (c * c + s * s > best_power) {
      best_power = c * c + s * s;
      best = w;
    }
  }
  return best;
}

// --- CSV ---------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta.json");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r' && c != ' ' && c != '"') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s, std::size_t line) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("CSV line " + std::to_string(line) + ": cannot parse '" + s + "'");
  return v;
}

}  // namespace

void write_dataset(const std::filesystem::path& csv, const Dataset& data) {
  data.validate();
  std::ofstream out(csv, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + csv.string());
  const auto p = data.inputs.cols(), q = data.measurements.cols();
  const auto n = data.states ? data.states->cols() : 0;
  out << "t";
  for (Eigen::Index i = 0; i < p; ++i) out << ",u_" << i + 1;
  for (Eigen::Index i = 0; i < q; ++i) out << ",y_" << i + 1;
  for (Eigen::Index i = 0; i < n; ++i) out << ",x_" << i + 1;
  out << "\n";
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    out << format_double(data.times[k]);
    for (Eigen::Index i = 0; i < p; ++i) out << ',' << format_double(data.inputs(r, i));
    for (Eigen::Index i = 0; i < q; ++i) out << ',' << format_double(data.measurements(r, i));
    for (Eigen::Index i = 0; i < n; ++i) out << ',' << format_double((*data.states)(r, i));
    out << "\n";
  }
  nlohmann::json meta = {{"format", "odelearn-dataset-v1"},
                         {"system", data.meta.system},
                         {"dt", data.meta.dt},
                         {"noise_sigma", data.meta.noise_sigma},
                         {"seed", data.meta.seed},
                         {"system_params", data.meta.system_params},
                         {"p", p},
                         {"q", q},
                         {"n", n}};
  if (!data.meta.segment_starts.empty()) meta["segment_starts"] = data.meta.segment_starts;
  if (data.x0) meta["x0"] = std::vector<double>(data.x0->data(), data.x0->data() + data.x0->size());
  std::ofstream side(sidecar_path(csv), std::ios::binary);
  side << meta.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw ConfigError("cannot open dataset " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset " + csv.string() + " is empty");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "t") throw ConfigError("dataset header must start with 't'");
  std::vector<int> ucol, ycol, xcol;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h.rfind("u_", 0) == 0) ucol.push_back(static_cast<int>(c));
    else if (h.rfind("y_", 0) == 0) ycol.push_back(static_cast<int>(c));
    else if (h.rfind("x_", 0) == 0) xcol.push_back(static_cast<int>(c));
    else throw ConfigError("unexpected dataset column '" + h + "'");
  }
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ConfigError("CSV line " + std::to_string(lineno) + ": wrong column count");
    std::vector<double> r(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) r[c] = parse_number(cells[c], lineno);
    rows.push_back(std::move(r));
  }
  Dataset d;
  const auto N = static_cast<Eigen::Index>(rows.size());
  d.inputs.resize(N, static_cast<Eigen::Index>(ucol.size()));
  d.measurements.resize(N, static_cast<Eigen::Index>(ycol.size()));
  if (!xcol.empty()) d.states = Eigen::MatrixXd(N, static_cast<Eigen::Index>(xcol.size()));
  for (Eigen::Index k = 0; k < N; ++k) {
    const auto& r = rows[static_cast<std::size_t>(k)];
    d.times.push_back(r[0]);
    for (std::size_t i = 0; i < ucol.size(); ++i) d.inputs(k, static_cast<Eigen::Index>(i)) = r[static_cast<std::size_t>(ucol[i])];
    for (std::size_t i = 0; i < ycol.size(); ++i) d.measurements(k, static_cast<Eigen::Index>(i)) = r[static_cast<std::size_t>(ycol[i])];
    for (std::size_t i = 0; i < xcol.size(); ++i) (*d.states)(k, static_cast<Eigen::Index>(i)) = r[static_cast<std::size_t>(xcol[i])];
  }
  const auto side = sidecar_path(csv);
  if (std::filesystem::exists(side)) {
    std::ifstream sin(side);
    const auto meta = nlohmann::json::parse(sin);
    d.meta.system = meta.value("system", "");
    d.meta.dt = meta.value("dt", 0.0);
    d.meta.noise_sigma = meta.value("noise_sigma", 0.0);
    d.meta.seed = meta.value("seed", std::uint64_t{0});
    d.meta.system_params = meta.value("system_params", nlohmann::json::object());
    d.meta.segment_starts = meta.value("segment_starts", std::vector<double>{});
    if (meta.contains("x0")) {
      const auto v = meta.at("x0").get<std::vector<double>>();
      d.x0 = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  }
  if (!d.x0 && d.states && N > 0) d.x0 = Eigen::VectorXd(d.states->row(0).transpose());
  if (d.meta.dt == 0.0 && d.times.size() > 1) d.meta.dt = d.times[1] - d.times[0];
  d.validate();
  return d;
}

std::pair<Dataset, Dataset> read_cascaded_tank_benchmark(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw ConfigError("cannot open " + csv.string());
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ue = col("uEst"), uv = col("uVal"), ye = col("yEst"), yv = col("yVal"), ts = col("Ts");
  if (ue < 0 || uv < 0 || ye < 0 || yv < 0) throw ConfigError("benchmark CSV needs uEst,uVal,yEst,yVal columns");
  std::vector<std::array<double, 4>> rows;
  double Ts = 4.0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    auto get = [&](int c) { return parse_number(cells.at(static_cast<std::size_t>(c)), lineno); };
    rows.push_back({get(ue), get(uv), get(ye), get(yv)});
    if (ts >= 0 && lineno == 2 && !cells.at(static_cast<std::size_t>(ts)).empty()) Ts = get(ts);
  }
  auto make = [&](int ui, int yi) {
    Dataset d;
    const auto N = static_cast<Eigen::Index>(rows.size());
    d.inputs.resize(N, 1);
    d.measurements.resize(N, 1);
    for (Eigen::Index k = 0; k < N; ++k) {
      d.times.push_back(static_cast<double>(k) * Ts);
      d.inputs(k, 0) = rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(ui)];
      d.measurements(k, 0) = rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(yi)];
    }
    d.meta.system = "cascaded_tank_benchmark";
    d.meta.dt = Ts;
    return d;
  };
  return {make(0, 2), make(1, 3)};
}

std::pair<Dataset, Dataset> cascaded_tank_surrogate(std::uint64_t seed, const TankSurrogateSpec& spec) {
  if (spec.samples < 2) throw ConfigError("surrogate needs at least two samples");
  if (!(spec.sim_dt > 0.0) || !(spec.dt >= spec.sim_dt)) throw ConfigError("surrogate steps must satisfy 0 < sim_dt <= dt");
  const double ratio = spec.dt / spec.sim_dt;
  const auto stride = static_cast<Eigen::Index>(std::llround(ratio));
  if (std::abs(ratio - static_cast<double>(stride)) > 1e-9 * ratio)
    throw ConfigError("surrogate dt must be a multiple of sim_dt");
  if (!(spec.input_high > spec.input_low)) throw ConfigError("surrogate input range is empty");
  const CascadedTank tank(spec.params, spec.sigma_v, spec.sigma_w);
  const double t_end = spec.dt * static_cast<double>(spec.samples - 1);
  const Rng root(seed);
  auto record = [&](const std::string& label) {
    const Rng r = root.split(label);
    const double mid = 0.5 * (spec.input_low + spec.input_high), half = 0.5 * (spec.input_high - spec.input_low);
    const InputSignal u = InputSignal::random_hold(1, half, spec.hold, t_end, r.split("input"), mid);
    Dataset d = synthesize(tank, spec.x0, u, t_end, spec.sim_dt, r.split("noise").key(), Method::Rk4).decimate(
        static_cast<std::size_t>(stride));
    d.x0.reset();
    d.states.reset();
    d.meta.system = "cascaded_tank_surrogate";
    d.validate();
    return d;
  };
  return {record("estimation"), record("validation")};
}

}  // namespace odelearn::dynamics
