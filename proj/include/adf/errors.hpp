#pragma once

#include <stdexcept>
#include <string>

namespace adf {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or parameter dimensions disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid model, training or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed weight, tensor or image file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Dataset directory tree does not follow the expected convention.
class LayoutError : public Error {
public:
    using Error::Error;
};

/// Input data violates an operation's precondition.
class InputError : public Error {
public:
    using Error::Error;
};

/// A metric is undefined for the given input (e.g. AUROC with one label).
class MetricUndefinedError : public Error {
public:
    using Error::Error;
};

/// Non-finite values or training divergence.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File system failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace adf
