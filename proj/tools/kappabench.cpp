#include <iostream>

#include "kappabench/cli.hpp"

int main(int argc, char** argv) { return kappabench::dispatch(argc, argv, std::cout, std::cerr); }
