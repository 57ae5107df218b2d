#pragma once

#include <stdexcept>
#include <string>

namespace egr {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyStructureError : public Error { using Error::Error; };
class FormatOverflowError : public Error { using Error::Error; };
class NoOverlapError : public Error { using Error::Error; };
class AlignmentError : public Error { using Error::Error; };
class GraphTooSmallError : public Error { using Error::Error; };
class OverrideError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class LossUndefinedError : public Error { using Error::Error; };
class NoInterfaceError : public Error { using Error::Error; };
class UndefinedMetricError : public Error { using Error::Error; };

class NumericalError : public Error {
 public:
  explicit NumericalError(std::string block)
      : Error("non-finite gradient in parameter block '" + block + "'"), block_(std::move(block)) {}
  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

// Weights container failures.
class WeightsError : public Error { using Error::Error; };
class WeightsVersionError : public WeightsError { using WeightsError::WeightsError; };
class WeightsShapeError : public WeightsError { using WeightsError::WeightsError; };
class WeightsTruncatedError : public WeightsError { using WeightsError::WeightsError; };

}  // namespace egr
