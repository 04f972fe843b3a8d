#include "usketch/cli.hpp"

int main(int argc, char** argv) { return usketch::cli::main_entry(argc, argv); }
