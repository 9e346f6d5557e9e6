#include "cli.hpp"

int main(int argc, char** argv) { return qsm::cli::run(argc, argv); }
