#pragma once

#include <stdexcept>
#include <string>

namespace modgen {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed user text: task strings, config values, gate files.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// An invalid model specification; the message names the offending field.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Tensor or gate-layout shape mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked on an object that is not ready for it (untrained, empty).
class StateError : public Error {
 public:
  using Error::Error;
};

/// On-disk artifact is missing, corrupt, or from an incompatible version.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset synthesis or ingestion failure.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Subnet extraction would produce a degenerate architecture.
class ExtractionError : public Error {
 public:
  using Error::Error;
};

/// Regression could not be fitted.
class FitError : public Error {
 public:
  using Error::Error;
};

/// No configuration on the search grid satisfies the scenario budgets.
class BudgetError : public Error {
 public:
  using Error::Error;
};

/// Training produced non-finite losses.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace modgen
