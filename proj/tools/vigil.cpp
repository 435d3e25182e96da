#include "vigil/cli.hpp"

int main(int argc, char** argv) { return vigil::cli::dispatch(argc, argv); }
