#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace diracnet {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor rank/dimension mismatches.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, degenerate norms, invalid statistics.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File format and filesystem problems.
class IoError : public Error {
public:
    using Error::Error;
};

/// Invalid user-facing configuration (specs, CLI flags).
class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename A, typename... Rest>
void msg_append(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    msg_append(os, rest...);
}
}  // namespace detail

/// Builds an error message from heterogeneous parts.
template <typename... Parts>
std::string msg(const Parts&... parts) {
    std::ostringstream os;
    detail::msg_append(os, parts...);
    return os.str();
}

}  // namespace diracnet
