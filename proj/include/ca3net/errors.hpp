#pragma once

#include <stdexcept>
#include <string>

namespace ca3net {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shape / axis mismatches. Messages name the offending axis.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Empty or out-of-bounds index ranges.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Invalid module or run configuration (divisibility, batch size 1 in
/// train-mode batch norm, schema/params mismatch, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Class label outside [0, K) or missing attribute labels.
class LabelError : public Error {
public:
    using Error::Error;
};

/// Misuse of the autodiff API (e.g. backward on a non-scalar loss).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Optimizer stepped over a parameter with no populated gradient.
class OptimError : public Error {
public:
    using Error::Error;
};

/// File parsing / reading / writing failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed metadata (carries the offending line where applicable).
class ParseError : public IoError {
public:
    using IoError::IoError;
};

/// Checkpoint version / integrity / shape-compatibility failures.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Training loss went non-finite.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Retrieval protocol violations (query identity absent from gallery).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Operation requires the model in a different train/eval mode.
class ModeError : public Error {
public:
    using Error::Error;
};

} // namespace ca3net
