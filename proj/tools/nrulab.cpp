#include "nrulab/cli.hpp"

int main(int argc, char** argv) { return nrulab::run_cli(argc, argv); }
