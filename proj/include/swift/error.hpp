#pragma once

#include <stdexcept>
#include <string>

namespace swift {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Filesystem failures: missing files, unwritable directories.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk content: bad manifest, blob size mismatch, label out of range.
class FormatError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite values or invalid numeric arguments (e.g. a non-positive temperature).
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration: unknown keys, out-of-range hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace swift
