#pragma once

#include <stdexcept>
#include <string>

namespace knnprompt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad flags, inconsistent resources, invalid task specs. CLI exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: malformed datasets, degenerate distributions. CLI exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kInvalidDimension,
  kTruncated,
  kMalformed,
};

// Binary / text file that does not match its documented layout. CLI exit code 2.
class FormatError : public DataError {
 public:
  FormatError(FormatErrc code, const std::string& what) : DataError(what), code_(code) {}
  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

// A violated internal invariant. CLI exit code 3.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace knnprompt
