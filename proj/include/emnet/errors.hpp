#pragma once

#include <stdexcept>
#include <string>

namespace emnet {

// Exception taxonomy shared by the whole toolkit. The CLI maps these to
// process exit codes (flags -> 2, I/O -> 3, data -> 4, numeric -> 5).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file contents (bad magic, bad version).
struct FormatError : Error {
    using Error::Error;
};

// File exists but payload is truncated or inconsistent with its header.
struct CorruptionError : Error {
    using Error::Error;
};

// Semantically invalid values (non-finite data, degenerate statistics).
struct DataError : Error {
    using Error::Error;
};

// Tensor/grid dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid model or run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// API contract violations (out-of-range arguments, non-scalar loss).
struct ContractError : Error {
    using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
    using Error::Error;
};

// Non-finite values produced during optimization or inference.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace emnet
