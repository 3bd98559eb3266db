#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace diffuse {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `diffuse` invocation. Help goes to `out`; diagnostics go to `err`
/// as a single `error[<kind>]: <message>` line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace diffuse
