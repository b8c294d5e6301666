// The `rtdlab` command line: pretrain, compare, diagnose, finetune, export.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "rtdlab/cli/experiment.hpp"

namespace rtdlab::cli {

// Runs one invocation and returns its exit code (see ExitCode). Normal
// output goes to `out`, progress and error messages to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
// Same, with the arguments after the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Identifies the build that produced a run; recorded in every manifest.
const char* code_version();

}  // namespace rtdlab::cli
