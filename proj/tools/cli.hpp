#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace hyperens {

/// Runs one command. `args` excludes the program name. Returns 0 on success,
/// 1 on a validation error (bad flags, config keys or values) and 2 on a
/// runtime failure; errors are printed to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hyperens
