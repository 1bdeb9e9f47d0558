#include <iostream>
#include <string>
#include <vector>

#include "a3net/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return a3net::run_cli(args, std::cout, std::cerr);
}
