#pragma once

#include <stdexcept>
#include <string>

namespace mvtsg {

// Chain has no unique stationary distribution (or is periodic where
// aperiodicity is required).
class NonErgodicError : public std::runtime_error {
 public:
  explicit NonErgodicError(const std::string& what) : std::runtime_error(what) {}
};

// An enumeration or witness set exceeds its configured cap.
class CapacityError : public std::runtime_error {
 public:
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values or degenerate denominators encountered mid-computation.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// An operation was called on input that violates its stated precondition.
class PreconditionError : public std::runtime_error {
 public:
  explicit PreconditionError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mvtsg
