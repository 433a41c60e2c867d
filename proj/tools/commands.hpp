#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace scvlm::cli {

enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfig = 2,
  kIo = 3,
  kNumeric = 4,
  kCompatibility = 5,
};

// Runs the `scvlm` command line; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace scvlm::cli
