#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kfacsched {

// Exit codes: 0 success, 1 invalid input, 2 file I/O failure.
int cli_main(int argc, char** argv);

// Same, with explicit arguments (argv[0] excluded) and streams.
int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err);

}  // namespace kfacsched
