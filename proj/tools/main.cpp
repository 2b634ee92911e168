#include "cli.hpp"

int main(int argc, char** argv) { return dualmod::cli::run(argc, argv); }
