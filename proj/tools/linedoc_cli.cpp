#include <string>
#include <vector>

#include "linedoc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return linedoc::cli::dispatch(std::move(args));
}
