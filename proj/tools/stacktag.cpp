#include "stacktag/cli.hpp"

int main(int argc, char** argv) { return stacktag::cli::run(argc, argv); }
