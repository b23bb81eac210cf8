#include <iostream>
#include <string>
#include <vector>

#include "mnvton/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mnvton::cli_main(args, std::cout, std::cerr);
}
