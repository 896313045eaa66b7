#include "nlos/cli.hpp"

int main(int argc, char** argv) { return nlos::run_cli(argc, argv); }
