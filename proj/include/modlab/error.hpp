#pragma once

#include <stdexcept>
#include <string>

namespace modlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Tensor shapes are incompatible for the requested primitive.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward value or gradient became NaN or infinite.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// File-format, schema or I/O failure.
class FormatError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidArgument(what);
}

}  // namespace detail

}  // namespace modlab
