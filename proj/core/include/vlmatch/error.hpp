#pragma once

#include <stdexcept>
#include <string>

namespace vlmatch {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or widths that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A numeric argument outside its allowed range (tau <= 0, eps <= 0, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// An integer index (token id, class target, axis) out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Input that makes the operation undefined, e.g. normalizing a zero vector.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// The object is in the wrong state for the call (no graph, no teacher, ...).
class StateError : public Error {
public:
    using Error::Error;
};

/// Domain validation failed (bad config, label out of range, duplicate id).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A file on disk is malformed or truncated.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A file on disk carries an unsupported format version.
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// A required input artifact does not exist.
class MissingInputError : public Error {
public:
    explicit MissingInputError(std::string path)
        : Error("missing input: " + path), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace vlmatch
