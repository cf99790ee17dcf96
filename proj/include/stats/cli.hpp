#pragma once

namespace stats::cli {

/// Entry point behind the `stats` binary. Exit codes: 0 success, 1 runtime
/// failure (diagnostic on stderr), 2 usage error.
int run(int argc, const char* const* argv);

}  // namespace stats::cli
