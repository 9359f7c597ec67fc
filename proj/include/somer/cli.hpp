#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace somer::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

/// Runs one subcommand. `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace somer::cli
