#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "commands.hpp"
#include "odelearn/control.hpp"
#include "odelearn/dynamics.hpp"
#include "odelearn/learner.hpp"

namespace py = pybind11;
using namespace odelearn;

namespace {

dynamics::Dataset synthesize(const std::string& system, const std::string& params, const Eigen::VectorXd& x0,
                             double t_end, double dt, std::uint64_t seed, const std::string& method,
                             const std::string& input, double level, double amplitude, double bound, double hold,
                             std::vector<double> omegas) {
  const auto sys = dynamics::make_system(system, nlohmann::json::parse(params.empty() ? "{}" : params));
  dynamics::InputSpec spec;
  spec.kind = input;
  spec.level = level;
  spec.amplitude = amplitude;
  spec.bound = bound;
  spec.hold = hold;
  spec.omegas = std::move(omegas);
  const Rng root(seed);
  const auto u = spec.build(sys->dims().p, t_end, root.split("input"));
  return dynamics::synthesize(*sys, x0, u, t_end, dt, root.split("noise").key(), dynamics::parse_method(method));
}

py::tuple run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "odelearn");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Learning interpretable ODE models from noisy data";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<dynamics::Dataset>(m, "Dataset")
      .def_readonly("times", &dynamics::Dataset::times)
      .def_readonly("inputs", &dynamics::Dataset::inputs)
      .def_readonly("measurements", &dynamics::Dataset::measurements)
      .def_readonly("states", &dynamics::Dataset::states)
      .def_readonly("x0", &dynamics::Dataset::x0)
      .def_property_readonly("dt", [](const dynamics::Dataset& d) { return d.meta.dt; })
      .def_property_readonly("system", [](const dynamics::Dataset& d) { return d.meta.system; })
      .def("__len__", &dynamics::Dataset::size)
      .def("slice", &dynamics::Dataset::slice, py::arg("begin"), py::arg("end"))
      .def("clean_outputs", &dynamics::Dataset::clean_outputs)
      .def("window", [](const dynamics::Dataset& d, const std::string& spec) {
        const auto [b, e] = dynamics::select_window(d, spec);
        return d.slice(b, e);
      });

  m.def("synthesize", &synthesize, py::arg("system"), py::arg("params") = "", py::arg("x0"),
        py::arg("t_end"), py::arg("dt"), py::arg("seed") = 1, py::arg("method") = "euler",
        py::arg("input") = "constant", py::arg("level") = 0.0, py::arg("amplitude") = 1.0, py::arg("bound") = 1.0,
        py::arg("hold") = 0.1, py::arg("omegas") = std::vector<double>{0.1},
        "Simulate a named system (params as a JSON object string).");
  m.def("read_dataset", &dynamics::read_dataset, py::arg("path"));
  m.def("write_dataset", &dynamics::write_dataset, py::arg("path"), py::arg("data"));
  m.def("cascaded_tank_surrogate",
        [](std::uint64_t seed) { return dynamics::cascaded_tank_surrogate(seed); }, py::arg("seed"),
        "Estimation and validation recordings of the stand-in cascaded-tank system.");
  m.def("rmse", &dynamics::rmse, py::arg("predicted"), py::arg("reference"));

  m.def(
      "lqr",
      [](const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R) {
        const auto s = control::lqr(A, B, Q, R);
        return py::make_tuple(s.K, s.P, s.residual);
      },
      py::arg("A"), py::arg("B"), py::arg("Q"), py::arg("R"), "Returns (K, P, riccati_residual).");

  m.def(
      "simulate_checkpoint",
      [](const std::filesystem::path& checkpoint, const dynamics::Dataset& data, const std::string& method,
         int substeps) {
        const auto nets = learner::load_checkpoint(checkpoint);
        const auto tr = learner::simulate_identified(nets, data, dynamics::parse_method(method), substeps,
                                                     data.x0 ? data.x0 : std::optional<Eigen::VectorXd>{});
        return tr.outputs;
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("method") = "euler", py::arg("substeps") = 1,
      "Open-loop outputs of a trained model over the dataset's time grid and inputs.");
  m.def(
      "identified_equations",
      [](const std::filesystem::path& checkpoint, double prune_tol) {
        return learner::identified_equations(learner::load_checkpoint(checkpoint), prune_tol);
      },
      py::arg("checkpoint"), py::arg("prune_tol") = 1e-3);

  m.def("run_cli", &run_cli, py::arg("args"), "Run the command-line tool; returns (exit_code, stdout, stderr).");
}
