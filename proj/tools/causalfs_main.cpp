#include "causalfs/cli.hpp"

int main(int argc, char** argv) { return causalfs::cli_main(argc, argv); }
