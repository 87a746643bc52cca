#pragma once

namespace harness {

/// CLI entry point shared by the binary and the tests.
/// Subcommands: generate, train, eval-shift, sweep-topk, routing-stats,
/// gradcheck. Exit codes: 0 success, 1 validation/usage error, 2 I/O error,
/// 3 numerical failure.
int run_cli(int argc, const char* const* argv);

}  // namespace harness
