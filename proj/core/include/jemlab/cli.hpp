#pragma once

namespace jemlab {

// Entry point for the jemlab command-line tool. Subcommands: train, sample,
// eval, ood, attack, landscape. Exit codes: 0 success, 1 divergence,
// 2 usage/config error, 3 I/O error.
int run_cli(int argc, char** argv);

}  // namespace jemlab
