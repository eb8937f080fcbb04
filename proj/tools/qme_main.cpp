#include "qme/cli/cli.hpp"

int main(int argc, char** argv) { return qme::cli::run(argc, argv); }
