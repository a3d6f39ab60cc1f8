#include "scanet/cli.hpp"

int main(int argc, char** argv) { return scanet::run_cli(argc, argv); }
