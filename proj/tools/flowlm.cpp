#include <string>
#include <vector>

#include "flowlm/cli.hpp"

int main(int argc, char** argv) {
    return flowlm::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
