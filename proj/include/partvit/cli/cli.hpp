#pragma once

#include <string>
#include <vector>

namespace partvit {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `partvit` tool. Returns the process exit code: 0 on
/// success, 1 on runtime failure, 2 on usage or validation errors.
int run_cli(int argc, const char* const* argv);

/// Convenience overload; args excludes the program name.
int run_cli(const std::vector<std::string>& args);

/// Sets the global log level from PARTVIT_LOG (trace, debug, info, warn,
/// error, critical, off); logs go to stderr.
void configure_logging();

}  // namespace partvit
