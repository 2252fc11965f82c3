#include "fmapkit/cli.hpp"

int main(int argc, char** argv) { return fmapkit::run_cli(argc, argv); }
