#pragma once

#include <ostream>

namespace flashkit {

/// Entry point of the `flashkit` command line tool with subcommands train,
/// bench, decode and verify. Returns the process exit code: 0 on success,
/// 1 when a command fails (including a failed verification) and 2 for
/// usage errors such as an unknown flag.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace flashkit
