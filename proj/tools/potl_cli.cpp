#include "potl/cli_io.hpp"

#include <iostream>

int main(int argc, char** argv) { return potl::run_cli(argc, argv, std::cout, std::cerr); }
