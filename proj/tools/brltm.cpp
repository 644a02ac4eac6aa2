#include "brltm/cli.hpp"

int main(int argc, char** argv) { return brltm::cli::run(argc, argv); }
