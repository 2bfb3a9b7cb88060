#include <vector>

#include "se2/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return se2::cli::run(args);
}
