#include "diracnet/cli.hpp"

int main(int argc, char** argv) { return diracnet::cli::run(argc, argv); }
