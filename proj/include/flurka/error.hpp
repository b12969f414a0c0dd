#pragma once

#include <stdexcept>
#include <string>

namespace flurka {

/// Shape or dimensional-invariant violation in caller-supplied input.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// Non-finite intermediate (feature-map overflow, training divergence).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// FLOP count does not fit in 64 unsigned bits.
class OverflowError : public std::overflow_error {
 public:
  explicit OverflowError(const std::string& what) : std::overflow_error(what) {}
};

/// Base-model parameters cannot be moved into the fused model.
class TransferError : public std::invalid_argument {
 public:
  explicit TransferError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace flurka
