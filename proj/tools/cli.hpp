#pragma once

#include <iosfwd>

namespace grouppose::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

/// Parses and executes one command line (argv[0] is the program name).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace grouppose::cli
