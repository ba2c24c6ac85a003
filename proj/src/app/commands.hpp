#pragma once

#include <string>
#include <vector>

#include "common/error.hpp"
#include "json.hpp"

namespace voxelseg::app {

/// Commands accepted by run_command, in help order.
const std::vector<std::string>& command_names();

/// Process exit code for an error: 2 config, 3 data, 4 numeric, 5 I/O.
int exit_code_for(ErrorCode code) noexcept;

/// One invocation: the config file contents plus dotted-path overrides
/// ("train.epochs" -> 3). Overrides win over the file and are recorded in
/// the manifest as cli_overrides.
struct RunRequest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, nlohmann::json>> overrides;
};

/// Applies the overrides to a copy of config. Throws ConfigError on a path
/// through a non-object.
nlohmann::json merged_config(const RunRequest& request);

/// Validates the whole config (paths included) before doing any work, then
/// runs the command and writes <out_dir>/manifest.json. Returns the manifest.
/// The top-level "threads" key (default 1) sets the worker count.
nlohmann::json run_command(const RunRequest& request);

}  // namespace voxelseg::app
