#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace restoredet::cli {

/// Optional fallback for --out: runs land in $RESTOREDET_OUTPUT_DIR/<command>.
inline constexpr const char* kOutputDirEnv = "RESTOREDET_OUTPUT_DIR";
inline constexpr const char* kRunManifest = "run_manifest.cfg";

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

std::string code_version();

/// Parses argv (args[0] is the program name), runs one subcommand and
/// returns the process exit code. Diagnostics go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace restoredet::cli
