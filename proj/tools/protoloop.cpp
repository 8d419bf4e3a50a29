#include "protoloop/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return protoloop::dispatch(argc, argv, std::cout, std::cerr); }
