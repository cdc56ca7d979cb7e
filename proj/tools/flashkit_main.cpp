#include <iostream>

#include "flashkit/cli.hpp"

int main(int argc, char** argv) { return flashkit::cli_main(argc, argv, std::cout, std::cerr); }
