#pragma once

#include <stdexcept>
#include <string>

namespace dcl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible shapes or extents.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by an operation, or a non-finite loss.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated file, bad magic, unsupported version.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Invalid argument or configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Misuse of the autodiff tape (consumed tape, non-scalar loss).
class TapeError : public Error {
public:
    using Error::Error;
};

} // namespace dcl
