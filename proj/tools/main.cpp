#include "peva/cli.hpp"

int main(int argc, char** argv) { return peva::run_cli(argc, argv); }
