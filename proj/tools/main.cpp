#include <iostream>

#include "icnn/cli.hpp"

int main(int argc, char** argv) { return icnn::run_cli(argc, argv, std::cout, std::cerr); }
