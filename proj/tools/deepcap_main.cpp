#include <iostream>

#include "deepcap/cli.hpp"

int main(int argc, char** argv) { return deepcap::run_cli(argc, argv, std::cout, std::cerr); }
