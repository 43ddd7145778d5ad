#pragma once

// Command-line front end: synth, train, eval, relight and plot.

#include <iosfwd>
#include <string>
#include <vector>

namespace rmvps::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

/// Runs one command line (without the program name). A JSON summary line goes to `out` on
/// success; usage text, progress and errors go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rmvps::cli
