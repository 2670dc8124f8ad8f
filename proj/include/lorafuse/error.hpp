// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lorafuse {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class FusionError : public Error {
 public:
  using Error::Error;
};

class NormalizationError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class OptimizationError : public Error {
 public:
  OptimizationError(const std::string& what, double lambda)
      : Error(what), lambda_(lambda) {}
  double lambda() const noexcept { return lambda_; }

 private:
  double lambda_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A required category (or other keyed entry) never appeared.
class CoverageError : public Error {
 public:
  using Error::Error;
};

/// Failure while parsing a JSONL file; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line) : Error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

enum class FormatErrorKind {
  bad_magic,
  malformed_header,
  truncated,
  checksum_mismatch,
  unsupported_version,
  validation,
  io,
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::bad_magic: return "bad magic";
    case FormatErrorKind::malformed_header: return "malformed header";
    case FormatErrorKind::truncated: return "truncated payload";
    case FormatErrorKind::checksum_mismatch: return "checksum mismatch";
    case FormatErrorKind::unsupported_version: return "unsupported format version";
    case FormatErrorKind::validation: return "validation failure";
    case FormatErrorKind::io: return "i/o failure";
  }
  return "unknown";
}

/// Error reading or writing the LORAFUS1 container.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& detail)
      : Error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

class JudgeProtocolError : public Error {
 public:
  using Error::Error;
};

class JudgeTransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace lorafuse
