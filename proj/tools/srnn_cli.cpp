#include <iostream>

#include "srnn/cli.hpp"

int main(int argc, char** argv) { return srnn::run_cli(argc, argv, std::cout, std::cerr); }
