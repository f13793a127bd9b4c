#pragma once

#include <stdexcept>
#include <string>

namespace s2v {

// Error taxonomy shared across the library. Each class maps to one process
// exit code in the CLI front end (see tools/).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string & msg) : std::runtime_error(msg) {}
};

// Shape or size mismatch between operands.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string & msg) : Error("dimension error: " + msg) {}
};

// Malformed caller input: bad token id, empty sequence, invalid argument value.
class InputError : public Error {
public:
    explicit InputError(const std::string & msg) : Error("input error: " + msg) {}
};

// API misuse: calling an operation in a state its contract forbids.
class ContractError : public Error {
public:
    explicit ContractError(const std::string & msg) : Error("contract error: " + msg) {}
};

// Invalid or inconsistent run configuration (exit code 2).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string & msg) : Error("config error: " + msg) {}
};

// Missing prerequisite artifact, e.g. a checkpoint for a later stage (exit code 3).
class DependencyError : public Error {
public:
    explicit DependencyError(const std::string & msg) : Error("dependency error: " + msg) {}
};

// Non-finite loss or other numeric breakdown during training (exit code 4).
class NumericError : public Error {
public:
    explicit NumericError(const std::string & msg) : Error("numeric error: " + msg) {}
};

// Failed file read/write or malformed file contents.
class IoError : public Error {
public:
    explicit IoError(const std::string & msg) : Error("io error: " + msg) {}
};

} // namespace s2v
