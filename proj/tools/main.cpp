#include "respeak/cli.hpp"

int main(int argc, char** argv) { return respeak::cli::dispatch(argc, argv); }
