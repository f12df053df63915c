#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace moce::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// Runs one subcommand. `args` excludes the program name; `in` stands in for
/// stdin. Diagnostics go to `err` as a single line; the exit code is 0,
/// 1 (usage) or 2 (runtime).
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

/// Reads a `key = value` file. Blank lines and lines starting with '#' are
/// skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path);

}  // namespace moce::cli
