#include "somer/cli.hpp"

int main(int argc, char** argv) { return somer::cli::dispatch(argc, argv); }
