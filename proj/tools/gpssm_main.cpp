#include "gpssm/cli.hpp"

int main(int argc, char** argv) { return gpssm::run_cli(argc, argv); }
