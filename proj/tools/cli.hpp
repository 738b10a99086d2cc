#pragma once

#include <ostream>

namespace gemcl::cli {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 runtime error, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gemcl::cli
