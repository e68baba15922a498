#include "sdtrack/cli.hpp"

int main(int argc, char** argv) { return sdtrack::cli::run(argc, argv); }
