#include "config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include <charconv>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "odelearn/random.hpp"

namespace odelearn::cli {

namespace pt = boost::property_tree;

namespace {

const std::vector<std::string> kSections{"run", "system", "dataset", "network", "learner", "control"};

std::string trim(std::string s) {
  boost::algorithm::trim(s);
  return s;
}

double to_double(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError(where + ": expected a number, got '" + text + "'");
  return v;
}

std::uint64_t to_uint(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError(where + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

std::vector<std::string> split_list(const std::string& text, const char* sep) {
  std::vector<std::string> parts;
  const std::string s = trim(text);
  if (s.empty()) return parts;
  boost::algorithm::split(parts, s, boost::algorithm::is_any_of(sep));
  for (auto& p : parts) p = trim(p);
  return parts;
}

template <class Seq>
std::string join_numbers(const Seq& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ", ";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>)
      out += dynamics::format_double(v);
    else
      out += std::to_string(v);
  }
  return out;
}

// Reads keys on demand, remembers which ones were consumed and records the
// value actually used.
class Resolver {
 public:
  explicit Resolver(const pt::ptree& in) : in_(in) {
    for (const auto& s : kSections) out_.add_child(pt::ptree::path_type(s, '\x1f'), pt::ptree());
  }

  std::string str(const std::string& sec, const std::string& key, const std::string& def) {
    const auto raw = raw_value(sec, key);
    const std::string v = raw ? trim(*raw) : def;
    record(sec, key, v);
    return v;
  }
  double num(const std::string& sec, const std::string& key, double def) {
    const auto raw = raw_value(sec, key);
    const double v = raw ? to_double(*raw, where(sec, key)) : def;
    record(sec, key, dynamics::format_double(v));
    return v;
  }
  std::uint64_t uint(const std::string& sec, const std::string& key, std::uint64_t def) {
    const auto raw = raw_value(sec, key);
    const std::uint64_t v = raw ? to_uint(*raw, where(sec, key)) : def;
    record(sec, key, std::to_string(v));
    return v;
  }
  std::size_t size(const std::string& sec, const std::string& key, std::size_t def) {
    return static_cast<std::size_t>(uint(sec, key, def));
  }
  int integer(const std::string& sec, const std::string& key, int def) {
    const auto raw = raw_value(sec, key);
    int v = def;
    if (raw) {
      const double d = to_double(*raw, where(sec, key));
      if (d != static_cast<double>(static_cast<long long>(d)) || std::abs(d) > 1e9)
        throw ConfigError(where(sec, key) + ": expected an integer, got '" + *raw + "'");
      v = static_cast<int>(d);
    }
    record(sec, key, std::to_string(v));
    return v;
  }
  bool flag(const std::string& sec, const std::string& key, bool def) {
    const auto raw = raw_value(sec, key);
    bool v = def;
    if (raw) {
      const std::string s = boost::algorithm::to_lower_copy(trim(*raw));
      if (s == "true" || s == "yes" || s == "on" || s == "1")
        v = true;
      else if (s == "false" || s == "no" || s == "off" || s == "0")
        v = false;
      else
        throw ConfigError(where(sec, key) + ": expected true or false, got '" + *raw + "'");
    }
    record(sec, key, v ? "true" : "false");
    return v;
  }
  std::vector<double> list(const std::string& sec, const std::string& key, const std::vector<double>& def) {
    const auto raw = raw_value(sec, key);
    std::vector<double> v = def;
    if (raw) {
      v.clear();
      for (const auto& p : split_list(*raw, ",")) v.push_back(to_double(p, where(sec, key)));
    }
    record(sec, key, join_numbers(v));
    return v;
  }
  std::vector<std::size_t> sizes(const std::string& sec, const std::string& key, const std::vector<std::size_t>& def) {
    const auto raw = raw_value(sec, key);
    std::vector<std::size_t> v = def;
    if (raw) {
      v.clear();
      for (const auto& p : split_list(*raw, ",")) v.push_back(static_cast<std::size_t>(to_uint(p, where(sec, key))));
    }
    record(sec, key, join_numbers(v));
    return v;
  }
  // Marks a key as known without recording it in the resolved tree.
  void ignore(const std::string& sec, const std::string& key) { used_.insert({sec, key}); }

  void finish() const {
    for (const auto& [sec, body] : in_) {
      if (!body.data().empty()) throw ConfigError("config: key '" + sec + "' outside of a section");
      if (sec != "manifest" && std::find(kSections.begin(), kSections.end(), sec) == kSections.end())
        throw ConfigError("config: unknown section [" + sec + "]");
      for (const auto& [key, value] : body)
        if (!used_.count({sec, key})) throw ConfigError("config: unknown key '" + key + "' in [" + sec + "]");
    }
  }

  const pt::ptree& resolved() const { return out_; }

 private:
  static std::string where(const std::string& sec, const std::string& key) { return "[" + sec + "] " + key; }

  std::optional<std::string> raw_value(const std::string& sec, const std::string& key) {
    used_.insert({sec, key});
    const auto s = in_.get_child_optional(pt::ptree::path_type(sec, '\x1f'));
    if (!s) return std::nullopt;
    const auto v = s->get_child_optional(pt::ptree::path_type(key, '\x1f'));
    if (!v) return std::nullopt;
    return v->data();
  }

  void record(const std::string& sec, const std::string& key, const std::string& value) {
    out_.get_child(pt::ptree::path_type(sec, '\x1f')).put(pt::ptree::path_type(key, '\x1f'), value);
  }

  const pt::ptree& in_;
  pt::ptree out_;
  std::set<std::pair<std::string, std::string>> used_;
};

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void resolve_system(Resolver& r, RunConfig& c) {
  c.system = r.str("system", "name", "duffing");
  auto& j = c.system_params;
  j = nlohmann::json::object();
  if (c.system == "duffing") {
    const dynamics::Duffing::Params d;
    const std::string scenario = r.str("system", "scenario", "fixed");
    if (scenario != "fixed" && scenario != "random")
      throw ConfigError("[system] scenario: expected fixed or random, got '" + scenario + "'");
    c.random_scenario = scenario == "random";
    const auto b = r.list("system", "b", {d.b.begin(), d.b.end()});
    if (b.size() != 4) throw ConfigError("[system] b: expected four coefficients");
    j["b"] = b;
    j["omega0"] = r.num("system", "omega0", d.omega0);
    j["sigma_v"] = r.num("system", "sigma_v", 0.0);
  } else if (c.system == "cascaded_tank") {
    const dynamics::CascadedTank::Params d;
    const auto k = r.list("system", "k", {d.k.begin(), d.k.end()});
    if (k.size() != 4) throw ConfigError("[system] k: expected four coefficients");
    j["k"] = k;
    j["pump_gain"] = r.num("system", "pump_gain", d.pump_gain);
    j["sensor_gain"] = r.num("system", "sensor_gain", d.sensor_gain);
    j["sensor_offset"] = r.num("system", "sensor_offset", d.sensor_offset);
    j["max_level"] = r.num("system", "max_level", d.max_level);
    j["sigma_v"] = r.num("system", "sigma_v", 0.0);
    j["sigma_w"] = r.num("system", "sigma_w", 0.0);
  } else if (c.system == "cartpole") {
    const dynamics::CartPole::Params d;
    j["cart_mass"] = r.num("system", "cart_mass", d.cart_mass);
    j["pole_mass"] = r.num("system", "pole_mass", d.pole_mass);
    j["length"] = r.num("system", "length", d.length);
    j["gravity"] = r.num("system", "gravity", d.gravity);
    j["force_limit"] = r.num("system", "force_limit", d.force_limit);
    j["sigma_v"] = r.num("system", "sigma_v", 0.0);
    j["sigma_w"] = r.num("system", "sigma_w", 0.0);
  } else {
    throw ConfigError("unknown system '" + c.system + "'");
  }
  // Constructs once so bad parameter values fail at load time.
  dynamics::make_system(c.system, j);
}

void resolve_dataset(Resolver& r, RunConfig& c) {
  c.t_end = r.num("dataset", "t_end", c.t_end);
  c.dt = r.num("dataset", "dt", c.dt);
  if (!(c.dt > 0.0) || !(c.t_end > 0.0)) throw ConfigError("[dataset] t_end and dt must be positive");
  c.method = dynamics::parse_method(r.str("dataset", "method", "euler"));
  c.substeps = r.size("dataset", "substeps", c.substeps);
  if (c.substeps == 0) throw ConfigError("[dataset] substeps must be positive");
  const auto x0 = r.list("dataset", "x0", {});
  if (!x0.empty()) c.x0 = to_vector(x0);
  const dynamics::InputSpec d;
  c.input.kind = r.str("dataset", "input", d.kind);
  if (c.input.kind != "constant" && c.input.kind != "multisine" && c.input.kind != "random_hold")
    throw ConfigError("[dataset] input: expected constant, multisine or random_hold");
  c.input.level = r.num("dataset", "input_level", d.level);
  c.input.amplitude = r.num("dataset", "input_amplitude", d.amplitude);
  c.input.bound = r.num("dataset", "input_bound", d.bound);
  c.input.hold = r.num("dataset", "input_hold", d.hold);
  c.input.omegas = r.list("dataset", "input_omegas", d.omegas);
  c.dataset_file = r.str("dataset", "file", c.dataset_file);
  if (c.dataset_file.empty()) throw ConfigError("[dataset] file must not be empty");
}

void resolve_network(Resolver& r, RunConfig& c) {
  auto& a = c.arch;
  const learner::ArchitectureConfig d;
  a.n = r.size("network", "n", 0);
  a.state_kind = r.str("network", "state_kind", d.state_kind);
  a.state_ops = r.str("network", "state_ops", d.state_ops);
  a.state_neurons = r.size("network", "state_neurons", d.state_neurons);
  a.state_branches = r.size("network", "state_branches", d.state_branches);
  a.state_layers = r.size("network", "state_layers", d.state_layers);
  a.raw_time = r.flag("network", "raw_time", d.raw_time);
  a.omegas = r.list("network", "omegas", d.omegas);
  a.state_prior = parse_prior(r.str("network", "state_situation", "unknown"), r.str("network", "state_prior", ""));
  a.state_hidden = r.sizes("network", "state_hidden", d.state_hidden);
  a.parametric_system = r.str("network", "parametric_system", d.parametric_system);
  a.parametric_init = r.list("network", "parametric_init", d.parametric_init);
  for (double f : r.list("network", "parametric_frozen", {})) {
    if (f != 0.0 && f != 1.0) throw ConfigError("[network] parametric_frozen: expected 0 or 1 entries");
    a.parametric_frozen.push_back(static_cast<std::uint8_t>(f));
  }
  a.omega_search = r.list("network", "omega_search", {});
  a.output_ops = r.str("network", "output_ops", d.output_ops);
  a.output_neurons = r.size("network", "output_neurons", d.output_neurons);
  a.output_prior = parse_prior(r.str("network", "output_situation", "unknown"), r.str("network", "output_prior", ""));
  a.output_trainable = r.flag("network", "output_trainable", d.output_trainable);
  a.mean_fourier = r.size("network", "mean_fourier", d.mean_fourier);
  a.mean_hidden = r.sizes("network", "mean_hidden", d.mean_hidden);
  a.cov_fourier = r.size("network", "cov_fourier", d.cov_fourier);
  a.cov_hidden = r.sizes("network", "cov_hidden", d.cov_hidden);
  a.cov_scale = r.num("network", "cov_scale", d.cov_scale);
  a.init_scale = r.num("network", "init_scale", d.init_scale);
  a.delta = r.num("network", "delta", d.delta);
  const auto q = r.list("network", "q_diag", {});
  if (!q.empty()) a.q_diag = to_vector(q);
  const auto rd = r.list("network", "r_diag", {});
  if (!rd.empty()) a.r_diag = to_vector(rd);
  a.p0 = r.num("network", "p0", d.p0);
  if (!(a.cov_scale > 0.0) || !(a.p0 > 0.0)) throw ConfigError("[network] cov_scale and p0 must be positive");
}

void resolve_learner(Resolver& r, RunConfig& c) {
  auto& t = c.train;
  const learner::TrainConfig d;
  t.mode = r.str("learner", "mode", d.mode);
  t.learning_rate = r.num("learner", "learning_rate", d.learning_rate);
  t.learning_rate_final = r.num("learner", "learning_rate_final", d.learning_rate_final);
  t.epochs_fit = r.size("learner", "epochs_fit", d.epochs_fit);
  t.epochs_sparse = r.size("learner", "epochs_sparse", d.epochs_sparse);
  t.batch_size = r.size("learner", "batch_size", d.batch_size);
  t.beta1 = r.num("learner", "beta1", d.beta1);
  t.beta2 = r.num("learner", "beta2", d.beta2);
  t.adam_eps = r.num("learner", "adam_eps", d.adam_eps);
  t.max_bad_steps = r.integer("learner", "max_bad_steps", d.max_bad_steps);
  t.divergence_factor = r.num("learner", "divergence_factor", d.divergence_factor);
  auto& w = t.weights;
  w.alpha1 = r.num("learner", "alpha1", d.weights.alpha1);
  w.alpha2 = r.num("learner", "alpha2", d.weights.alpha2);
  w.alpha3 = r.num("learner", "alpha3", d.weights.alpha3);
  w.alpha4 = r.num("learner", "alpha4", d.weights.alpha4);
  w.alpha41 = r.num("learner", "alpha41", d.weights.alpha41);
  w.alpha42 = r.num("learner", "alpha42", d.weights.alpha42);
  w.a.a1 = r.num("learner", "r0_a1", d.weights.a.a1);
  w.a.a2 = r.num("learner", "r0_a2", d.weights.a.a2);
  w.a.a3 = r.num("learner", "r0_a3", d.weights.a.a3);
  w.a.a4 = r.num("learner", "r0_a4", d.weights.a.a4);
  w.delta = r.num("learner", "delta", d.weights.delta);
  c.train_window = r.str("learner", "window", c.train_window);
  t.seed = Rng(c.seed).split("train").key();
  t.validate();
}

void resolve_control(Resolver& r, RunConfig& c) {
  auto& l = c.loop;
  const control::RlLoopConfig d;
  l.oracle = r.flag("control", "oracle", d.oracle);
  l.max_episodes = r.size("control", "max_episodes", d.max_episodes);
  l.episode_length = r.num("control", "episode_length", d.episode_length);
  l.dt = r.num("control", "dt", d.dt);
  l.reward_window = r.size("control", "reward_window", d.reward_window);
  l.stable_threshold = r.num("control", "stable_threshold", d.stable_threshold);
  l.switch_angle = r.num("control", "switch_angle", d.switch_angle);
  l.switch_fraction = r.num("control", "switch_fraction", d.switch_fraction);
  l.switch_window = r.num("control", "switch_window", d.switch_window);
  l.angle_index = r.size("control", "angle_index", d.angle_index);
  l.random_bound = r.num("control", "random_bound", d.random_bound);
  l.random_hold = r.num("control", "random_hold", d.random_hold);
  l.validate();

  auto& m = c.controller.mpc;
  const control::MpcConfig md;
  m.horizon = r.num("control", "horizon", md.horizon);
  m.control_dt = r.num("control", "control_dt", md.control_dt);
  m.u_max = r.num("control", "u_max", md.u_max);
  m.iterations = r.integer("control", "iterations", md.iterations);
  m.memory = r.size("control", "memory", md.memory);
  m.method = dynamics::parse_method(r.str("control", "mpc_method", dynamics::method_name(md.method)));
  m.substeps = r.integer("control", "substeps", md.substeps);
  m.cost = r.str("control", "cost", md.cost);
  if (m.cost != "angle") throw ConfigError("[control] cost: the swing-up controller needs the angle cost");
  m.effort_weight = r.num("control", "effort_weight", md.effort_weight);
  m.angle_index = l.angle_index;
  m.validate();

  const auto q = r.list("control", "lqr_q", {1.0, 1.0, 10.0, 1.0});
  c.controller.Qc = to_vector(q).asDiagonal();
  c.controller.Rc = r.num("control", "lqr_r", control::ControllerConfig{}.Rc);
  if (!(c.controller.Rc > 0.0)) throw ConfigError("[control] lqr_r must be positive");
  for (double v : q)
    if (v < 0.0) throw ConfigError("[control] lqr_q entries must be non-negative");
}

RunConfig resolve(const pt::ptree& tree) {
  Resolver r(tree);
  RunConfig c;
  c.seed = r.uint("run", "seed", c.seed);
  c.output_dir = r.str("run", "output_dir", c.output_dir);
  resolve_system(r, c);
  resolve_dataset(r, c);
  resolve_network(r, c);
  resolve_learner(r, c);
  resolve_control(r, c);
  for (const char* k : {"command", "created", "version"}) r.ignore("manifest", k);
  r.finish();
  c.resolved = r.resolved();
  return c;
}

}  // namespace

eqlnet::PriorKnowledge parse_prior(const std::string& situation, const std::string& terms) {
  eqlnet::PriorKnowledge prior;
  prior.situation = eqlnet::parse_situation(trim(situation));
  for (const auto& item : split_list(terms, ";")) {
    if (item.empty()) continue;
    const auto f = split_list(item, ":");
    if (f.size() < 2 || f.size() > 4) throw ConfigError("prior term '" + item + "': expected target:term[:coef][:frozen]");
    eqlnet::KnownTerm t;
    const auto target = to_uint(f[0], "prior term '" + item + "'");
    if (target == 0) throw ConfigError("prior term '" + item + "': targets are 1-based");
    t.target = static_cast<std::size_t>(target - 1);
    t.term = f[1];
    std::size_t k = 2;
    if (k < f.size() && f[k] != "frozen") t.coefficient = to_double(f[k++], "prior term '" + item + "'");
    if (k < f.size()) {
      if (f[k] != "frozen") throw ConfigError("prior term '" + item + "': expected 'frozen', got '" + f[k] + "'");
      t.frozen = true;
      ++k;
    }
    if (k != f.size()) throw ConfigError("prior term '" + item + "': trailing fields");
    prior.terms.push_back(t);
  }
  return prior;
}

std::string format_prior(const eqlnet::PriorKnowledge& prior) {
  std::string out;
  for (const auto& t : prior.terms) {
    if (!out.empty()) out += "; ";
    out += std::to_string(t.target + 1) + ":" + t.term + ":" + dynamics::format_double(t.coefficient);
    if (t.frozen) out += ":frozen";
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  return resolve(tree);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string manifest_text(const RunConfig& config, const std::string& command, const std::string& created) {
  std::ostringstream out;
  for (const auto& [sec, body] : config.resolved) {
    out << "[" << sec << "]\n";
    for (const auto& [key, value] : body) out << key << " = " << value.data() << "\n";
    out << "\n";
  }
  out << "[manifest]\ncommand = " << command << "\ncreated = " << created << "\nversion = " << ODELEARN_VERSION << "\n";
  return out.str();
}

}  // namespace odelearn::cli
