#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace safe::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Runs one `safe` invocation; args exclude the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace safe::cli
