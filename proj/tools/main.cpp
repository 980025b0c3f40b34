#include <vector>

#include "tradeiv/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tradeiv::cli::dispatch(std::move(args));
}
