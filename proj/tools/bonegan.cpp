#include "bonegan/cli.hpp"

int main(int argc, char** argv) { return bonegan::cli::dispatch(argc, argv); }
