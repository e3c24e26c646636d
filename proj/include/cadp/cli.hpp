#pragma once

#include <iosfwd>

namespace cadp {

/// Exit codes of the command-line interface.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,    // I/O, format, failed oracle checks
  kExitUsage = 2,      // unknown subcommand or flag, missing argument
  kExitConfig = 3,     // unreadable or invalid configuration
  kExitNumerical = 4,  // non-finite loss or gradient during training
};

/// Entry point of the `cadp` tool. Results go to `out` (CSV or one JSON record
/// per line); every failure writes one JSON record to `err`.
int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cadp
