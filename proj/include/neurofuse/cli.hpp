#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include <json.hpp>

#include "neurofuse/config.hpp"

namespace neurofuse {

struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::size_t jobs = 1;
};

/// Loads the config file (defaults when no path is given) and applies the
/// command-line overrides.
RunConfig load_run_config(const CommandOptions& options);

/// Runs one command and returns its exit status. Results go to files under
/// the config's output directory; `out` receives human-readable summaries.
int dispatch(const std::string& command, const RunConfig& config, std::size_t jobs, std::ostream& out);

/// Full command-line entry point. Failures print a one-line JSON error
/// record ({"error": {kind, module, message}}) to `err` and return nonzero.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

/// Log level from NEUROFUSE_LOG (trace, debug, info, warn, error, off); warn by default.
void configure_logging();

}  // namespace neurofuse
