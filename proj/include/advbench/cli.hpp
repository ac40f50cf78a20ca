#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace advbench {

// Runs one CLI invocation; `args` excludes the program name. Returns the exit
// status: 0 success, 1 validation error, 2 runtime failure. Messages go to
// `err`; data goes to files only.
int cli_run(const std::vector<std::string>& args, std::ostream& err);

}  // namespace advbench
