#include <iostream>

#include "rtdlab/cli/commands.hpp"
#include "rtdlab/util/alloc.hpp"

int main(int argc, char** argv) {
  rtdlab::tune_allocator();
  return rtdlab::cli::run_cli(argc, argv, std::cout, std::cerr);
}
