#include <vector>

#include "elen/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return elen::run_command(args);
}
