#include "commands.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "odelearn/random.hpp"

namespace odelearn::cli {

namespace fs = std::filesystem;
using dynamics::format_double;

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

fs::path prepare_output_dir(const RunConfig& c) {
  const fs::path dir(c.output_dir);
  fs::create_directories(dir);
  return dir;
}

void write_manifest(const fs::path& dir, const RunConfig& c, const std::string& command) {
  write_text(dir / "manifest.cfg", manifest_text(c, command, utc_now()));
}

std::unique_ptr<StateSpaceModel> truth_model(const RunConfig& c, Eigen::VectorXd* x0) {
  nlohmann::json params = c.system_params;
  if (c.random_scenario) {
    Rng r = Rng(c.seed).split("scenario");
    const auto sc = dynamics::sample_duffing_scenario(r);
    params["b"] = sc.params.b;
    params["omega0"] = sc.params.omega0;
    if (x0) *x0 = sc.x0;
  }
  return dynamics::make_system(c.system, params);
}

std::string losses_line(const learner::LossComponents& l, double total) {
  return "L1=" + format_double(l.l1) + " L2=" + format_double(l.l2) + " L3=" + format_double(l.l3) +
         " L4=" + format_double(l.l4) + " total=" + format_double(total);
}

std::string gnuplot_script(const fs::path& csv, std::size_t q, double rmse) {
  std::ostringstream s;
  s << "set datafile separator ','\n"
    << "set key autotitle columnhead\n"
    << "set xlabel 't'\n"
    << "set title 'rmse = " << format_double(rmse) << "'\n"
    << "plot";
  for (std::size_t j = 0; j < q; ++j) {
    s << (j ? ", \\\n    " : " ") << "'" << csv.filename().string() << "' using 1:" << j + 2 << " with lines";
    s << ", '' using 1:" << q + j + 2 << " with lines dashtype 2";
  }
  s << "\n";
  return s.str();
}

}  // namespace

Overrides parse_overrides(const std::vector<std::string>& items) {
  Overrides out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    const auto dot = item.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("override '" + item + "': expected section.key=value");
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return out;
}

RunConfig load_run_config(const fs::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  // Overrides replace the file's value in the parsed tree, which is then
  // written back to text for the regular resolver.
  if (!overrides.empty()) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
      pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError("config: " + std::string(e.what()));
    }
    for (const auto& [key, value] : overrides) {
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot), name = key.substr(dot + 1);
      auto& s = tree.get_child_optional(pt::ptree::path_type(sec, '\x1f'))
                    ? tree.get_child(pt::ptree::path_type(sec, '\x1f'))
                    : tree.add_child(pt::ptree::path_type(sec, '\x1f'), pt::ptree());
      s.put(pt::ptree::path_type(name, '\x1f'), value);
    }
    std::ostringstream os;
    pt::write_ini(os, tree);
    text = os.str();
  }
  return parse_config(text);
}

int cmd_synth(const RunConfig& c, std::ostream& out) {
  Eigen::VectorXd x0;
  const auto sys = truth_model(c, &x0);
  const Dims d = sys->dims();
  if (!c.random_scenario) x0 = c.x0 ? *c.x0 : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.n));
  if (static_cast<std::size_t>(x0.size()) != d.n)
    throw ConfigError("[dataset] x0 has " + std::to_string(x0.size()) + " entries, the system has " +
                      std::to_string(d.n) + " states");
  const Rng root(c.seed);
  const auto input = c.input.build(d.p, c.t_end, root.split("input"));
  const auto data =
      dynamics::synthesize(*sys, x0, input, c.t_end, c.dt / static_cast<double>(c.substeps), root.split("noise").key(),
                           c.method)
          .decimate(c.substeps);
  const fs::path dir = prepare_output_dir(c);
  const fs::path csv = dir / c.dataset_file;
  dynamics::write_dataset(csv, data);
  write_manifest(dir, c, "synth");
  out << "wrote " << csv.string() << " (" << data.size() << " samples)\n";
  return kExitOk;
}

int cmd_train(const RunConfig& c, const fs::path& dataset, std::ostream& out) {
  const auto all = dynamics::read_dataset(dataset);
  const auto [b, e] = dynamics::select_window(all, c.train_window);
  if (e - b < 2) throw ConfigError("training window '" + c.train_window + "' holds fewer than two samples");
  const auto data = all.slice(b, e);

  auto arch = c.arch;
  if (arch.n == 0) {
    if (!data.states) throw ConfigError("[network] n is required when the dataset has no state columns");
    arch.n = static_cast<std::size_t>(data.states->cols());
  }
  auto nets = learner::build_networks(arch, data, Rng(c.seed).split("init").key());
  const auto rep = learner::train(nets, data, c.train);

  const fs::path dir = prepare_output_dir(c);
  learner::save_checkpoint(dir / "model.json", nets);
  std::ostringstream report;
  report << "epoch,L1,L2,L3,L4\n";
  auto row = [&](std::size_t epoch, const learner::LossComponents& l) {
    report << epoch << ',' << format_double(l.l1) << ',' << format_double(l.l2) << ',' << format_double(l.l3) << ','
           << format_double(l.l4) << '\n';
  };
  row(0, rep.initial);
  for (const auto& r : rep.epochs) row(r.epoch, r.components);
  write_text(dir / "report.csv", report.str());
  std::string eqs;
  for (const auto& s : learner::identified_equations(nets, 1e-3)) eqs += s + "\n";
  write_text(dir / "equations.txt", eqs);
  write_manifest(dir, c, "train");

  out << losses_line(rep.final, rep.final_total) << "\n" << eqs;
  if (rep.diverged) {
    out << "training diverged: " << rep.divergence_message << "\n";
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const EvalOptions& o, std::ostream& out) {
  const auto nets = learner::load_checkpoint(checkpoint);
  const auto data = dynamics::read_dataset(dataset);
  const Dims d = nets.dims();
  if (data.input_dim() != d.p || data.output_dim() != d.q)
    throw ConfigError("dataset dimensions do not match the checkpoint");
  Eigen::VectorXd x0;
  if (data.x0)
    x0 = *data.x0;
  else if (nets.x0_trainable)
    x0 = nets.x0;
  else
    throw ConfigError("the dataset records no x0 and the checkpoint has no trained x0");
  if (static_cast<std::size_t>(x0.size()) != d.n) throw ConfigError("dataset x0 does not match the checkpoint states");

  const auto [b, e] = dynamics::select_window(data, o.window);
  if (e == b) throw ConfigError("evaluation window '" + o.window + "' is empty");
  const auto tr = learner::simulate_identified(nets, data, o.method, o.substeps, x0);
  const auto clean = data.clean_outputs();
  const Eigen::MatrixXd& ref = clean ? *clean : data.measurements;
  const auto rows = static_cast<Eigen::Index>(e - b), first = static_cast<Eigen::Index>(b);
  const Eigen::MatrixXd ysim = tr.outputs.middleRows(first, rows), ytrue = ref.middleRows(first, rows);
  const double err = ysim.allFinite() ? dynamics::rmse(ysim, ytrue) : std::numeric_limits<double>::infinity();

  const fs::path csv = o.out.empty() ? checkpoint.parent_path() / "eval.csv" : o.out;
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  std::ostringstream s;
  s << "t";
  for (Eigen::Index j = 0; j < ref.cols(); ++j) s << ",y_true_" << j + 1;
  for (Eigen::Index j = 0; j < ref.cols(); ++j) s << ",y_sim_" << j + 1;
  s << "\n";
  for (Eigen::Index k = 0; k < rows; ++k) {
    s << format_double(data.times[b + static_cast<std::size_t>(k)]);
    for (Eigen::Index j = 0; j < ref.cols(); ++j) s << ',' << format_double(ytrue(k, j));
    for (Eigen::Index j = 0; j < ref.cols(); ++j) s << ',' << format_double(ysim(k, j));
    s << "\n";
  }
  write_text(csv, s.str());
  fs::path gp = csv;
  gp.replace_extension(".gp");
  write_text(gp, gnuplot_script(csv, static_cast<std::size_t>(ref.cols()), err));
  out << "rmse=" << format_double(err) << "\n";
  return kExitOk;
}

int cmd_rl(const RunConfig& c, std::ostream& out) {
  if (c.system != "cartpole") throw ConfigError("rl needs [system] name = cartpole");
  const auto truth = truth_model(c, nullptr);
  control::RlLearnerConfig lc{c.arch, c.train};
  if (lc.arch.n == 0) lc.arch.n = truth->dims().n;
  const fs::path dir = prepare_output_dir(c);
  const auto log = control::run_rl_loop(*truth, lc, c.loop, c.controller, c.seed, dir);
  write_manifest(dir, c, "rl");
  for (const auto& ep : log.episodes) {
    out << "episode " << ep.index << " " << ep.kind << " reward=" << format_double(ep.reward);
    if (ep.switch_time) out << " switch=" << format_double(*ep.switch_time);
    if (!ep.note.empty()) out << " (" << ep.note << ")";
    out << "\n";
  }
  if (log.success) {
    out << "swing-up in episode " << *log.success_episode << "\n";
    return kExitOk;
  }
  out << "no swing-up\n";
  return kExitNoSwingUp;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learn interpretable ODE models from noisy data"};
  app.require_subcommand(1);
  std::string config_path, dataset_path, checkpoint_path, eval_out, eval_window = "all", eval_method = "euler";
  int eval_substeps = 1;
  std::vector<std::string> sets;

  auto* synth = app.add_subcommand("synth", "Simulate a dataset from a known system");
  synth->add_option("config", config_path, "Config file")->required();
  synth->add_option("--set", sets, "Override a config value (section.key=value)");

  auto* train = app.add_subcommand("train", "Train the learner on a dataset");
  train->add_option("config", config_path, "Config file")->required();
  train->add_option("dataset", dataset_path, "Dataset CSV")->required();
  train->add_option("--set", sets, "Override a config value (section.key=value)");

  auto* eval = app.add_subcommand("eval", "Simulate a checkpoint and report the output RMSE");
  eval->add_option("checkpoint", checkpoint_path, "Checkpoint JSON")->required();
  eval->add_option("dataset", dataset_path, "Dataset CSV")->required();
  eval->add_option("--window", eval_window, "all, first<T>s, last<T>s or range:<t0>:<t1>");
  eval->add_option("--method", eval_method, "euler or rk4");
  eval->add_option("--substeps", eval_substeps, "Integrator steps per sample")->check(CLI::PositiveNumber);
  eval->add_option("--out", eval_out, "CSV of t, y_true, y_sim (default: eval.csv next to the checkpoint)");

  auto* rl = app.add_subcommand("rl", "Model-based RL swing-up of the cart-pole");
  rl->add_option("config", config_path, "Config file")->required();
  rl->add_option("--set", sets, "Override a config value (section.key=value)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*eval) {
      EvalOptions o;
      o.window = eval_window;
      o.method = dynamics::parse_method(eval_method);
      o.substeps = eval_substeps;
      o.out = eval_out;
      return cmd_eval(checkpoint_path, dataset_path, o, out);
    }
    const RunConfig c = load_run_config(config_path, parse_overrides(sets));
    if (*synth) return cmd_synth(c, out);
    if (*train) return cmd_train(c, dataset_path, out);
    return cmd_rl(c, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace odelearn::cli
