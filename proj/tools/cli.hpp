#pragma once

namespace qsm::cli {

// Runs one subcommand. Returns 0 on success, 1 on input errors, 2 on numerical failure.
int run(int argc, char** argv);

} // namespace qsm::cli
