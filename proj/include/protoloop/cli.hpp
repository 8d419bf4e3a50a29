#ifndef PROTOLOOP_CLI_HPP
#define PROTOLOOP_CLI_HPP

#include <iosfwd>

namespace protoloop {

/// Parses and executes one command. Returns 0 on success, 1 on validation or
/// usage errors and 2 on runtime failures.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace protoloop

#endif  // PROTOLOOP_CLI_HPP
