#include <string>
#include <vector>

#include "arrest/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return arrest::run_cli(args);
}
