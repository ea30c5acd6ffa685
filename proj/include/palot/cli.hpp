#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace palot::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Runs one command. `args` excludes the program name. JSON goes to `out`,
// human-readable logs to `err` (verbosity from PALOT_LOG_LEVEL: error, warn,
// info, debug).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

const std::vector<std::string>& command_names();

}  // namespace palot::cli
