#include "layeq/cli.hpp"

int main(int argc, char** argv) { return layeq::cli::run(argc, argv); }
