#include "odelearn/networks.hpp"

#include <algorithm>
#include <cmath>

namespace odelearn::learner {

// --- Mlp ----------------------------------------------------------------------

Mlp::Mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t out) {
  if (in == 0 || out == 0) throw ConfigError("network needs at least one input and one output");
  sizes_.clear();
  sizes_.push_back(in);
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("hidden layers must have at least one unit");
    sizes_.push_back(h);
  }
  sizes_.push_back(out);
  std::size_t count = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) count += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  params.assign(count, 0.0);
}

void Mlp::init(Rng& rng, double out_scale) {
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const std::size_t in = sizes_[l], out = sizes_[l + 1];
    const bool last = l + 2 == sizes_.size();
    const double a = std::sqrt(6.0 / static_cast<double>(in + out)) * (last ? out_scale : 1.0);
    for (std::size_t i = 0; i < in * out; ++i) params[off + i] = rng.uniform(-a, a);
    for (std::size_t i = 0; i < out; ++i) params[off + in * out + i] = 0.0;
    off += in * out + out;
  }
}

std::size_t Mlp::output_bias_offset() const { return params.size() - sizes_.back(); }

nlohmann::json Mlp::to_json() const { return {{"sizes", sizes_}, {"params", params}}; }

Mlp Mlp::from_json(const nlohmann::json& j) {
  const auto sizes = j.at("sizes").get<std::vector<std::size_t>>();
  if (sizes.size() < 2) throw ConfigError("network checkpoint: need at least two layer sizes");
  Mlp m(sizes.front(), std::vector<std::size_t>(sizes.begin() + 1, sizes.end() - 1), sizes.back());
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != m.params.size()) throw ConfigError("network checkpoint: weight count does not match the sizes");
  m.params = p;
  return m;
}

// --- TimeNet ------------------------------------------------------------------

TimeNet::TimeNet(std::size_t out, std::size_t fourier, std::vector<std::size_t> hidden, double t0, double span)
    : TimeNet(out, fourier, std::move(hidden), std::vector<double>{t0}, std::vector<double>{span}) {}

TimeNet::TimeNet(std::size_t out, std::size_t fourier, std::vector<std::size_t> hidden, std::vector<double> starts,
                 std::vector<double> spans)
    : mlp_(1 + 2 * fourier, std::move(hidden), out), fourier_(fourier), starts_(std::move(starts)),
      spans_(std::move(spans)) {
  if (starts_.empty() || starts_.size() != spans_.size())
    throw ConfigError("time network: need one span per segment start");
  for (std::size_t k = 0; k < spans_.size(); ++k) {
    if (!(spans_[k] > 0.0)) throw ConfigError("time network: the time span must be positive");
    if (k > 0 && !(starts_[k] > starts_[k - 1])) throw ConfigError("time network: segment starts must increase");
  }
  params_.assign(starts_.size() * mlp_.num_params(), 0.0);
}

void TimeNet::init(Rng& rng, double out_scale) {
  for (std::size_t k = 0; k < segments(); ++k) {
    if (k == 0) {
      mlp_.init(rng, out_scale);
    } else {
      Rng r = rng.split(k);
      mlp_.init(r, out_scale);
    }
    std::copy(mlp_.params.begin(), mlp_.params.end(), params_.begin() + static_cast<std::ptrdiff_t>(k * per_segment()));
  }
  std::fill(mlp_.params.begin(), mlp_.params.end(), 0.0);
}

std::size_t TimeNet::segment_of(double t) const {
  const auto it = std::upper_bound(starts_.begin(), starts_.end(), t);
  return it == starts_.begin() ? 0 : static_cast<std::size_t>(it - starts_.begin()) - 1;
}

nlohmann::json TimeNet::to_json() const {
  return {{"fourier", fourier_}, {"starts", starts_}, {"spans", spans_}, {"sizes", mlp_.sizes()}, {"params", params_}};
}

TimeNet TimeNet::from_json(const nlohmann::json& j) {
  const auto sizes = j.at("sizes").get<std::vector<std::size_t>>();
  if (sizes.size() < 2) throw ConfigError("time network checkpoint: need at least two layer sizes");
  TimeNet n(sizes.back(), j.at("fourier").get<std::size_t>(),
            std::vector<std::size_t>(sizes.begin() + 1, sizes.end() - 1), j.at("starts").get<std::vector<double>>(),
            j.at("spans").get<std::vector<double>>());
  if (sizes.front() != 1 + 2 * n.fourier_) throw ConfigError("time network checkpoint: feature count mismatch");
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != n.params_.size()) throw ConfigError("time network checkpoint: weight count does not match the sizes");
  n.params_ = p;
  return n;
}

// --- NetworkFunction ------------------------------------------------------------

NetworkFunction::NetworkFunction(eqlnet::OdeNetwork net) : net_(std::move(net)) {
  if (net_.inputs().nw != 0) throw ConfigError("learned networks take noise additively (nw must be 0)");
}

Eigen::VectorXd NetworkFunction::eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                      double t) const {
  return net_.forward<double>(p, x, u, Eigen::VectorXd(), t);
}

VecV NetworkFunction::eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const {
  return net_.forward<Var>(p, x, u, VecV(), t);
}

VecV NetworkFunction::denominators(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const {
  return net_.evaluate<Var>(p, net_.inputs().assemble<Var>(x, u, VecV(), t)).den;
}

nlohmann::json NetworkFunction::to_json() const { return eqlnet::to_json(net_); }

// --- MlpFunction ----------------------------------------------------------------

MlpFunction::MlpFunction(eqlnet::InputLayout layout, Mlp mlp) : layout_(std::move(layout)), mlp_(std::move(mlp)) {
  if (layout_.nw != 0) throw ConfigError("learned networks take noise additively (nw must be 0)");
  if (mlp_.in_dim() != layout_.size()) throw ConfigError("MLP input width does not match its input layout");
  frozen_.assign(mlp_.num_params(), 0);
}

Eigen::VectorXd MlpFunction::eval(std::span<const double> p, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                  double t) const {
  return mlp_.forward<double>(p, layout_.assemble<double>(x, u, Eigen::VectorXd(), t));
}

VecV MlpFunction::eval(std::span<const Var> p, const VecV& x, const VecV& u, const Var& t) const {
  return mlp_.forward<Var>(p, layout_.assemble<Var>(x, u, VecV(), t));
}

nlohmann::json MlpFunction::to_json() const {
  return {{"kind", "mlp"},
          {"inputs",
           {{"n", layout_.n}, {"p", layout_.p}, {"raw_time", layout_.raw_time}, {"omegas", layout_.omegas}}},
          {"mlp", mlp_.to_json()},
          {"frozen", frozen_}};
}

// --- ParametricFunction ---------------------------------------------------------

std::vector<std::string> ParametricFunction::parameter_names(const std::string& system) {
  if (system == "duffing") return {"b1", "b2", "b3", "b4", "omega0"};
  if (system == "cascaded_tank") return {"k1", "k2", "k3", "k4"};
  throw ConfigError("no parametric model for system '" + system + "'");
}

ParametricFunction::ParametricFunction(std::string system, std::vector<double> values)
    : system_(std::move(system)), values_(std::move(values)) {
  if (values_.size() != parameter_names(system_).size())
    throw ConfigError("parametric " + system_ + " model takes " + std::to_string(parameter_names(system_).size()) +
                      " parameters");
  frozen_.assign(values_.size(), 0);
}

nlohmann::json ParametricFunction::to_json() const {
  return {{"kind", "parametric"}, {"system", system_}, {"params", values_}, {"frozen", frozen_}};
}

std::unique_ptr<Function> function_from_json(const nlohmann::json& j) {
  if (j.value("format", "") == "odenet-v1") return std::make_unique<NetworkFunction>(eqlnet::network_from_json(j));
  const auto kind = j.value("kind", "");
  if (kind == "mlp") {
    eqlnet::InputLayout in;
    const auto& ji = j.at("inputs");
    in.n = ji.at("n").get<std::size_t>();
    in.p = ji.at("p").get<std::size_t>();
    in.raw_time = ji.at("raw_time").get<bool>();
    in.omegas = ji.at("omegas").get<std::vector<double>>();
    auto f = std::make_unique<MlpFunction>(in, Mlp::from_json(j.at("mlp")));
    f->frozen() = j.at("frozen").get<std::vector<std::uint8_t>>();
    return f;
  }
  if (kind == "parametric") {
    auto f = std::make_unique<ParametricFunction>(j.at("system").get<std::string>(),
                                                  j.at("params").get<std::vector<double>>());
    f->frozen() = j.at("frozen").get<std::vector<std::uint8_t>>();
    return f;
  }
  throw ConfigError("unknown function kind in checkpoint");
}

// --- LearnedModel ---------------------------------------------------------------

LearnedModel::LearnedModel(std::unique_ptr<Function> state, std::unique_ptr<Function> output, std::size_t p,
                           NoiseModel noise)
    : state_(std::move(state)), output_(std::move(output)), p_(p) {
  set_noise(std::move(noise));
}

LearnedModel::LearnedModel(const LearnedModel& other)
    : StateSpaceModel(other), state_(other.state_->clone()), output_(other.output_->clone()), p_(other.p_) {}

LearnedModel& LearnedModel::operator=(const LearnedModel& other) {
  if (this != &other) {
    StateSpaceModel::operator=(other);
    state_ = other.state_->clone();
    output_ = other.output_->clone();
    p_ = other.p_;
    unbind();
  }
  return *this;
}

void LearnedModel::bind(std::span<const Var> state_params, std::span<const Var> output_params) const {
  if (state_params.size() != state_->params().size() || output_params.size() != output_->params().size())
    throw ConfigError("learned model: bound parameter count mismatch");
  bound_state_ = state_params;
  bound_output_ = output_params;
  bound_ = true;
}

void LearnedModel::unbind() const {
  bound_state_ = {};
  bound_output_ = {};
  bound_ = false;
}

namespace {
std::vector<Var> as_constants(const std::vector<double>& p) { return std::vector<Var>(p.begin(), p.end()); }
}  // namespace

Eigen::VectorXd LearnedModel::f(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                                double t) const {
  return state_->eval(x, u, t) + w;
}

VecV LearnedModel::f(const VecV& x, const VecV& u, const VecV& w, const Var& t) const {
  if (bound_) return state_->eval(bound_state_, x, u, t) + w;
  const auto p = as_constants(state_->params());
  return state_->eval(std::span<const Var>(p), x, u, t) + w;
}

Eigen::VectorXd LearnedModel::g(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                                double t) const {
  return output_->eval(x, u, t) + v;
}

VecV LearnedModel::g(const VecV& x, const VecV& u, const VecV& v, const Var& t) const {
  if (bound_) return output_->eval(bound_output_, x, u, t) + v;
  const auto p = as_constants(output_->params());
  return output_->eval(std::span<const Var>(p), x, u, t) + v;
}

}  // namespace odelearn::learner
