#include "jemlab/cli.hpp"

int main(int argc, char** argv) { return jemlab::run_cli(argc, argv); }
