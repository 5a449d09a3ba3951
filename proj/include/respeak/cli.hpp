#pragma once

#include <cstdio>

namespace respeak::cli {

// placeholder until the subcommands land
inline int dispatch(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::fprintf(stderr, "respeak: no subcommands wired yet\n");
    return 1;
}

} // namespace respeak::cli
