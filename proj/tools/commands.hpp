#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace todsynth::cli {

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericalError = 3,
  kMissingArtifact = 4,
};

// Parses argv (without the program name) and runs one subcommand. Machine
// readable results go to `out`, diagnostics to the log.
int run(const std::vector<std::string>& args, std::ostream& out);

}  // namespace todsynth::cli
