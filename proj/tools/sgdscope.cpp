#include <string>
#include <vector>

#include "sgdscope/cli.hpp"

int main(int argc, char** argv) {
  return sgdscope::cli::main_entry(std::vector<std::string>(argv + 1, argv + argc));
}
