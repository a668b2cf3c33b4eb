#pragma once

#include <stdexcept>
#include <string>

namespace kvec {

/// Base class for all library errors. `exit_code()` maps onto the CLI's
/// status codes: 1 usage, 2 invariant/validation, 3 numerical.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
  virtual const char* kind() const noexcept { return "validation"; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
  const char* kind() const noexcept override { return "usage"; }
};

/// A value does not match the dataset schema (arity or categorical domain).
class SchemaError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "schema"; }
};

/// Broken data invariant: ordering, missing labels, malformed records.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
  const char* kind() const noexcept override { return "numerical"; }
};

}  // namespace kvec
