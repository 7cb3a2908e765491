#pragma once

#include <stdexcept>
#include <string>

namespace mtunet {

// Error taxonomy shared by the library and the CLI exit-code mapping.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes / extents.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value (bad field, impossible combination).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Object is not in a state that permits the operation (e.g. missing grads).
class StateError : public Error {
public:
    using Error::Error;
};

// Bad input data (label out of range, inconsistent batch).
class DataError : public Error {
public:
    using Error::Error;
};

// NaN/Inf surfaced by a forward op or a diverged computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed file header or unparseable field.
class ParseError : public Error {
public:
    using Error::Error;
};

// File contents inconsistent with their declared layout.
class CorruptionError : public Error {
public:
    using Error::Error;
};

}  // namespace mtunet
