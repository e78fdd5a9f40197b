// Subcommands of the odelearn tool. Each returns the process exit code:
//   0 success, 1 unexpected failure, 2 bad configuration or input,
//   3 training diverged, 4 the RL loop did not swing the pole up.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"

namespace odelearn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitNoSwingUp = 4;

// "section.key=value" assignments applied on top of the config file.
using Overrides = std::vector<std::pair<std::string, std::string>>;
Overrides parse_overrides(const std::vector<std::string>& items);

RunConfig load_run_config(const std::filesystem::path& path, const Overrides& overrides = {});

struct EvalOptions {
  std::string window = "all";
  dynamics::Method method = dynamics::Method::Euler;
  int substeps = 1;
  std::filesystem::path out;  // CSV; empty: eval.csv next to the checkpoint
};

int cmd_synth(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, const std::filesystem::path& dataset, std::ostream& out);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset, const EvalOptions& options,
             std::ostream& out);
int cmd_rl(const RunConfig& config, std::ostream& out);

// Full command line; errors go to `err`.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace odelearn::cli
