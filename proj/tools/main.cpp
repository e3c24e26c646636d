#include <iostream>

#include "cadp/cli.hpp"

int main(int argc, char** argv) { return cadp::cli_run(argc, argv, std::cout, std::cerr); }
