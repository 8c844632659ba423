#include "ffscope/cli.hpp"

int main(int argc, char** argv) { return ffscope::run_cli(argc, argv); }
