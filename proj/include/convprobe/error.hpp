#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace convprobe {

// User errors (bad input files, flags, specs) map to CLI exit code 1;
// NumericError and anything unexpected map to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedFormatError : public FormatError {
 public:
  using FormatError::FormatError;
};

class LengthError : public Error {
 public:
  LengthError(const std::string& what, long overflow)
      : Error(what), overflow_(overflow) {}
  long overflow() const { return overflow_; }

 private:
  long overflow_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class StratificationError : public Error {
 public:
  using Error::Error;
};

class IntervalTooShortError : public Error {
 public:
  IntervalTooShortError(const std::string& what, int layer)
      : Error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class BasisError : public Error {
 public:
  using Error::Error;
};

class PredictionError : public Error {
 public:
  using Error::Error;
};

class DegenerateTestError : public Error {
 public:
  using Error::Error;
};

class ContrastError : public Error {
 public:
  using Error::Error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RankError : public NumericError {
 public:
  RankError(const std::string& what, std::vector<std::string> aliased)
      : NumericError(what), aliased_(std::move(aliased)) {}
  const std::vector<std::string>& aliased() const { return aliased_; }

 private:
  std::vector<std::string> aliased_;
};

class StabilityError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace convprobe
