#include "fairmeta/harness.hpp"

#include <iostream>
#include <string>
#include <vector>

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    return fairmeta::run_cli(args, std::cout, std::cerr);
}
