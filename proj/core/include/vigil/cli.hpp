#pragma once

#include <string>
#include <vector>

namespace vigil::cli {

// Exit codes: 0 ok, 1 usage, 2 data/config error, 3 training divergence.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, char** argv);

}  // namespace vigil::cli
