#include "stats/cli.hpp"

int main(int argc, char** argv) { return stats::cli::run(argc, argv); }
