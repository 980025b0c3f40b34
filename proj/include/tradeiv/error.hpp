#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace tradeiv {

// Validation and contract failures throughout the library. The CLI maps
// these to exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  format_into(os, rest...);
}

}  // namespace detail

template <class... Parts>
[[noreturn]] void fail(const Parts&... parts) {
  std::ostringstream os;
  detail::format_into(os, parts...);
  throw Error(os.str());
}

template <class... Parts>
void require(bool cond, const Parts&... parts) {
  if (!cond) fail(parts...);
}

}  // namespace tradeiv
