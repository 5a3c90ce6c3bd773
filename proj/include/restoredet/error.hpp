#pragma once

#include <stdexcept>
#include <string>

namespace restoredet {

enum class ErrorKind {
  kConfig,
  kParameter,
  kShape,
  kDataset,
  kNumeric,
  kTarget,
  kBenchmark,
  kIo,
  kUsage,
};

const char* to_string(ErrorKind kind);

/// Base exception for every failure raised by the library. The kind lets the
/// CLI map failures onto categorized messages and exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::kConfig, m) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& m) : Error(ErrorKind::kParameter, m) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorKind::kShape, m) {}
};

class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& m) : Error(ErrorKind::kDataset, m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(ErrorKind::kNumeric, m) {}
};

class TargetError : public Error {
 public:
  explicit TargetError(const std::string& m) : Error(ErrorKind::kTarget, m) {}
};

class BenchmarkError : public Error {
 public:
  explicit BenchmarkError(const std::string& m) : Error(ErrorKind::kBenchmark, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::kIo, m) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error(ErrorKind::kUsage, m) {}
};

}  // namespace restoredet
