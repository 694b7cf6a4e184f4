// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spanattn::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kMissingArtifact = 2, kNumeric = 3 };

/// Runs one command line (without the program name). Errors are reported
/// on `err` and mapped to ExitCode values; nothing escapes as an exception.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spanattn::cli
