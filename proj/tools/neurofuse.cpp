#include <iostream>

#include "neurofuse/cli.hpp"

int main(int argc, char** argv) { return neurofuse::run_cli(argc, argv, std::cout, std::cerr); }
