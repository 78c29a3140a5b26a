#pragma once

namespace msg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Subcommands: synth, train, enhance, analyze rolloff|onsets, abtest.
// Returns 2 on usage errors, 1 on runtime failures, 0 on success.
int run_cli(int argc, const char* const* argv);

}  // namespace msg::cli
