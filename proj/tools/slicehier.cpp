#include <iostream>

#include "slicehier/commands.hpp"

int main(int argc, char** argv) { return slicehier::run_cli(argc, argv, std::cout, std::cerr); }
