#pragma once

#include <ostream>

namespace deepcap {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Entry point for the deepcap command line (synth, train, infer, eval, bench).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace deepcap
