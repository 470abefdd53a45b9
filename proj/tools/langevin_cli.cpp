#include "langevin/cli.hpp"

int main(int argc, char** argv) { return langevin::cli::run(argc, argv); }
