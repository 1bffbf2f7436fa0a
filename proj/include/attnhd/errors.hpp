#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace attnhd {

// Base of everything the toolkit throws on bad input. Command-line front
// ends map DataError-derived failures to exit code 1 and ConfigError to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (files, records, labels).
class DataError : public Error {
 public:
  using Error::Error;
};

// A file does not follow the layout it claims, or violates its header.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Magic bytes or version not understood by this reader.
class UnsupportedFormatError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Payload ended early or is otherwise damaged. Carries the byte offset at
// which the damage was detected.
class CorruptionError : public FormatError {
 public:
  CorruptionError(const std::string& what, std::uint64_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// A mathematical precondition does not hold (empty input, negative weight).
class DomainError : public DataError {
 public:
  using DataError::DataError;
};

// Optimisation could not run (e.g. a single class in the training labels).
class TrainingError : public DataError {
 public:
  using DataError::DataError;
};

// Feature selection produced nothing usable.
class SelectionError : public DataError {
 public:
  using DataError::DataError;
};

// Invalid command-line or configuration-file settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnhd
