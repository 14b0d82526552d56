#include <iostream>

#include "phyprobit/cli.hpp"

int main(int argc, char** argv) { return phyprobit::cli::main(argc, argv, std::cout, std::cerr); }
