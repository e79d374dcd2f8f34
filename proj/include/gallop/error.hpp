#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace gallop {

// Single exception type for all structured errors; messages carry the
// offending node/layer/example so callers can report precisely.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Parts>
[[noreturn]] inline void fail(const Parts&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw Error(os.str());
}

template <typename... Parts>
inline void require(bool cond, const Parts&... parts) {
    if (!cond) fail(parts...);
}

} // namespace gallop
