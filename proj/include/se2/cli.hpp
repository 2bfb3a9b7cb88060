#pragma once

#include <string>
#include <vector>

namespace se2::cli {

/// Entry point for the se2cnn command line tool. Returns the process exit
/// code: 0 success, 1 validation error (bad flags, missing/duplicate
/// paths, invalid configs), 2 runtime failure.
int run(const std::vector<std::string>& args);

}  // namespace se2::cli
