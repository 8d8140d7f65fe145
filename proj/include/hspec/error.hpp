#pragma once

#include <stdexcept>
#include <string>

namespace hspec {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated a documented precondition (bad dims, bad config, bad enum).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A file or serialized payload did not match its format.
class FormatError : public Error {
 public:
  enum class Kind { kMagic, kTruncated, kCountMismatch, kSchema, kIo };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Iteration failed to converge, produced non-finite values, or hit a degenerate case.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace hspec
