#include <string>
#include <vector>

#include "dcn/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dcn::run_cli(args);
}
