#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mnvton {

// Entry point of the mnvton executable. Returns the process exit code:
//   0 success, 1 other failure, 2 bad config or usage, 3 numerical failure,
//   4 I/O failure.
// Failures print exactly one line `error kind=<kind> message=<json string>`
// to err.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mnvton
