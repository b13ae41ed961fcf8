#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace adf::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDiverged = 2, kIo = 3 };

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

/// Runs `adf <subcommand> ...`; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace adf::cli
