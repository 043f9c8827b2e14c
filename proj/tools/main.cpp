#include <iostream>

#include "cli.hpp"
#include "safe/kernels/kernels.hpp"

int main(int argc, char** argv) {
  safe::kernels::apply_worker_env();
  return safe::cli::cli_main(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
