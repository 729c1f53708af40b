#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mgrasp {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitRuntime = 2,
  kExitCheckFailed = 3,
};

/// Runs one invocation. `args` excludes the program name. Structured records
/// go to `out`, diagnostics and usage text to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mgrasp
