#include "egr/cli.hpp"

int main(int argc, char** argv) { return egr::cli::run(argc, argv); }
