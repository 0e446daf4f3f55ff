#include <iostream>

#include "spatseg/commands.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return spatseg::run_cli(args, std::cout, std::cerr);
}
