#pragma once

#include <stdexcept>
#include <string>

namespace ffsc {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 1 (user error); anything else escaping is an internal error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A configuration or spec value outside its valid range.
class InvalidSpecError : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the object's current state.
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// IDX ingestion
class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};
class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};
class CountMismatchError : public IoError {
 public:
  using IoError::IoError;
};

// Episodes / splits
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Backbone bank
class DuplicateEntryError : public Error {
 public:
  using Error::Error;
};
class MissingEntryError : public Error {
 public:
  using Error::Error;
};
class CorruptCheckpointError : public IoError {
 public:
  using IoError::IoError;
};

// Selection / adaptation
class DegenerateFeatureError : public Error {
 public:
  using Error::Error;
};
class DegenerateLabelError : public Error {
 public:
  using Error::Error;
};
class SelectionFailureError : public Error {
 public:
  using Error::Error;
};

// Evaluation
class TaskFailureError : public Error {
 public:
  using Error::Error;
};

}  // namespace ffsc
