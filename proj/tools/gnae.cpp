#include <iostream>

#include "gnae/cli.hpp"

int main(int argc, char** argv) { return gnae::run_cli(argc, argv, std::cout, std::cerr); }
