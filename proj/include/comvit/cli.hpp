#pragma once

#include <iosfwd>

namespace comvit {

/// Exit codes: 0 success, 1 usage/config, 2 format/IO, 3 numerical failure.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitFormat = 2, kExitNumerical = 3 };

/// Subcommands: train, eval, info, gradcheck, gradcam, synth.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace comvit
