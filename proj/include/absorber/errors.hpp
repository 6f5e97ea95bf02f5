#pragma once

#include <stdexcept>
#include <string>

namespace absorber {

// Base class for everything this library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up for an op.
class DimensionError : public Error {
public:
    using Error::Error;
};

// An operation was called outside its contract (non-scalar loss, mismatched
// trace lengths, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid model / run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Input data unusable (corpus too small, ...).
class DataError : public Error {
public:
    using Error::Error;
};

// Position / capacity limits exceeded.
class CapacityError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced by a tensor op; message names the op.
class NumericError : public Error {
public:
    using Error::Error;
};

// A training loop went numerically bad; message carries the step index.
class OptimizationError : public Error {
public:
    using Error::Error;
};

// Filesystem failures, with path context.
class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint bytes are not a valid checkpoint (bad magic, version, header).
class FormatError : public Error {
public:
    using Error::Error;
};

// Checkpoint is structurally valid but the payload is damaged or truncated.
class CorruptionError : public Error {
public:
    using Error::Error;
};

} // namespace absorber
