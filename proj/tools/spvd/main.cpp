#include <iostream>

#include "spvd/cli/commands.hpp"

int main(int argc, char** argv) { return spvd::cli::run_cli(argc, argv, std::cout, std::cerr); }
