#include "kfacsched/cli.hpp"

int main(int argc, char** argv) { return kfacsched::cli_main(argc, argv); }
