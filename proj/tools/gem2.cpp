#include <vector>

#include "gem2/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gem2::cli::run(std::move(args));
}
