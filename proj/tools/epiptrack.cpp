#include "epiptrack/cli.hpp"

int main(int argc, char** argv, char** envp) { return epiptrack::run_cli(argc, argv, envp); }
