#pragma once

#include <stdexcept>
#include <string>

namespace kadapter {

// Base of every error raised by the library. Callers that only need to
// distinguish "bad input" from "runtime failure" can catch these two.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public InputError {
 public:
  using InputError::InputError;
};

class ArgumentError : public InputError {
 public:
  using InputError::InputError;
};

class NumericInputError : public InputError {
 public:
  using InputError::InputError;
};

class UndefinedLossError : public InputError {
 public:
  using InputError::InputError;
};

class VocabularyError : public InputError {
 public:
  using InputError::InputError;
};

class LengthError : public InputError {
 public:
  using InputError::InputError;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

class AnnotationError : public InputError {
 public:
  using InputError::InputError;
};

class ValidationError : public InputError {
 public:
  using InputError::InputError;
};

class ParseError : public InputError {
 public:
  using InputError::InputError;
};

class QueryError : public InputError {
 public:
  using InputError::InputError;
};

class MetricError : public InputError {
 public:
  using InputError::InputError;
};

// Checkpoint decoding failures.
class FormatError : public InputError {
 public:
  using InputError::InputError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class BadVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace kadapter
