#include <string>
#include <vector>

#include "scalemix/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return scalemix::cli::run(std::move(args));
}
