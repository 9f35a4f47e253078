#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace runet {

/// Base class for every error raised by the library. `category()` maps onto
/// the CLI exit code.
class Error : public std::runtime_error {
 public:
  enum class Category : int {
    kDimension = 2,
    kParameter = 3,
    kNumeric = 4,
    kContract = 5,
    kIo = 6,
    kParse = 7,
    kLookup = 8,
  };

  Error(Category c, const std::string& what) : std::runtime_error(what), category_(c) {}
  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(Category::kDimension, what) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(Category::kParameter, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(Category::kContract, what) {}
};

class LookupError : public Error {
 public:
  explicit LookupError(const std::string& what) : Error(Category::kLookup, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Category::kIo, what) {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(Category::kParse, "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Singular pivot met during LU factorisation.
class SingularMatrixError : public Error {
 public:
  explicit SingularMatrixError(std::size_t pivot)
      : Error(Category::kNumeric, "singular system: zero pivot at index " + std::to_string(pivot)),
        pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

/// A softmax row with every entry masked out.
class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(std::size_t row)
      : Error(Category::kNumeric, "row_softmax: row " + std::to_string(row) + " is fully masked"),
        row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Training produced a non-finite loss.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(std::size_t step, double last_finite)
      : Error(Category::kNumeric, "non-finite loss at step " + std::to_string(step) +
                                      " (last finite loss " + std::to_string(last_finite) + ")"),
        step_(step),
        last_finite_(last_finite) {}
  std::size_t step() const noexcept { return step_; }
  double last_finite() const noexcept { return last_finite_; }

 private:
  std::size_t step_;
  double last_finite_;
};

}  // namespace runet
