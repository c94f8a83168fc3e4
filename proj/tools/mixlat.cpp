#include "mixlat/cli.hpp"

int main(int argc, char** argv) {
  return mixlat::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
