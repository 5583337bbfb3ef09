#include <dlmwpo/cli.hpp>

int main(int argc, char** argv) { return dlmwpo::cli_main(argc, argv); }
