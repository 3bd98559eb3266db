#include <iostream>
#include <string>
#include <vector>

#include "diffuse/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return diffuse::run_cli(args, std::cout, std::cerr);
}
