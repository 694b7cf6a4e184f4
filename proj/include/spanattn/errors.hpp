// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace spanattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration value is out of range or inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// An API was called in a state that does not allow it.
class UsageError : public Error {
public:
    using Error::Error;
};

/// A primitive produced a NaN or an infinity.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Caller-supplied data (tokens, files) is malformed.
class InputError : public Error {
public:
    using Error::Error;
};

/// A task generator cannot satisfy its parameters.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// An internal consistency check failed.
class InvariantError : public Error {
public:
    using Error::Error;
};

/// A required artifact (checkpoint, config file) is missing.
class MissingArtifactError : public Error {
public:
    using Error::Error;
};

}  // namespace spanattn
