#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spatseg {

/// Entry point behind the `spatseg` executable. `args` excludes the program
/// name. Returns the process exit code: 0 on success, 2 on usage errors,
/// 1 on any other failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spatseg
