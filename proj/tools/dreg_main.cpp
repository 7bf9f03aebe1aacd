#include "dreg/cli.hpp"

int main(int argc, char** argv) { return dreg::cli::run_cli(argc, argv); }
