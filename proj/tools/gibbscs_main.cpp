#include <iostream>
#include <string>
#include <vector>

#include "gibbscs/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gibbscs::run_cli(args, std::cout, std::cerr);
}
