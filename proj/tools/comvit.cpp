#include <iostream>

#include "comvit/cli.hpp"

int main(int argc, char** argv) { return comvit::run_cli(argc, argv, std::cout, std::cerr); }
