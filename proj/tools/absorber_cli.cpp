#include "absorber/cli.hpp"

int main(int argc, char** argv) { return absorber::cli_dispatch(argc, argv); }
