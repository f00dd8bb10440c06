#pragma once

#include <ostream>

namespace ffsc::cli {

/// Runs the `ffsc` command line and returns its exit code: 0 on success, 1
/// for usage and library errors, 2 for anything unexpected.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ffsc::cli
