#include "partvit/cli/cli.hpp"

int main(int argc, char** argv) {
  partvit::configure_logging();
  return partvit::run_cli(argc, argv);
}
