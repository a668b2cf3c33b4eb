#pragma once

#include <string>
#include <vector>

namespace kvec::cli {

/// Parses `args` (without the program name), runs the subcommand and
/// returns the process exit status. Errors are reported on stderr as one
/// JSON line: {"error": kind, "code": status, "message": text}.
int run(const std::vector<std::string>& args);

}  // namespace kvec::cli
