#include <iostream>
#include <string>
#include <vector>

#include "calibra/cli.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return calibra::cli::run(args, std::cout, std::cerr);
}
