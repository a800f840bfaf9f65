#include "fedned/cli.hpp"

int main(int argc, char** argv) { return fedned::cli::run_app(argc, argv); }
