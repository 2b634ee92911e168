#pragma once

// `dualmod` command-line driver: train, eval, ablate, synth, check-grad.

namespace dualmod::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntimeError = 1,
  kConfigError = 2,
  kGradCheckFailed = 3,
};

/// Parses argv, runs one subcommand and maps failures onto ExitCode.
/// Messages go to stderr, prefixed with their category.
int run(int argc, const char* const* argv);

}  // namespace dualmod::cli
