#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ffscope {

// Exit codes: 0 success, 1 usage error, 2 data or model error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

} // namespace ffscope
