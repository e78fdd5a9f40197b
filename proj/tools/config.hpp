// Run configuration of the odelearn tool: one INI file with the sections
// [run], [system], [dataset], [network], [learner] and [control].
// Every key has a default; unknown sections or keys are errors. The resolved
// configuration (defaults filled in) is written back as a manifest that is
// itself a valid config file.
#pragma once

#include <Eigen/Core>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "odelearn/control.hpp"
#include "odelearn/dynamics.hpp"
#include "odelearn/learner.hpp"

namespace odelearn::cli {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  // [system]
  std::string system = "duffing";
  nlohmann::json system_params = nlohmann::json::object();
  bool random_scenario = false;  // duffing: draw b, omega0 and x0 from the seed

  // [dataset]
  double t_end = 48.0;
  double dt = 0.02;
  dynamics::Method method = dynamics::Method::Euler;
  std::size_t substeps = 1;  // integration steps per recorded sample
  std::optional<Eigen::VectorXd> x0;
  dynamics::InputSpec input;
  std::string dataset_file = "data.csv";

  // [network], [learner]
  learner::ArchitectureConfig arch;
  learner::TrainConfig train;
  std::string train_window = "all";

  // [control]
  control::RlLoopConfig loop;
  control::ControllerConfig controller;

  // Fully resolved key/value tree, sections as children.
  boost::property_tree::ptree resolved;
};

// Throws ConfigError on syntax errors, unknown keys and invalid values.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);

// Resolved config as INI text followed by a [manifest] section holding the
// command and the creation time.
std::string manifest_text(const RunConfig& config, const std::string& command, const std::string& created);

// Prior terms "target:term[:coefficient][:frozen]" separated by ";", with
// 1-based targets, e.g. "1:x2; 2:x1^3:-0.5:frozen".
eqlnet::PriorKnowledge parse_prior(const std::string& situation, const std::string& terms);
std::string format_prior(const eqlnet::PriorKnowledge& prior);

}  // namespace odelearn::cli
