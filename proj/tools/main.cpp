#include "karina/cli/app.hpp"

int main(int argc, char** argv) { return karina::cli::run_cli(argc, argv); }
