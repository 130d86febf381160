#pragma once

#include <iosfwd>

namespace keydyn {

/// Entry point behind the `keydyn` executable. Exit codes: 0 success,
/// 1 usage or configuration, 2 data, 3 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace keydyn
