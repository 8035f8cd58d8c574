#pragma once

#include <stdexcept>
#include <string>

namespace idvlm {

// Base of every error the toolkit throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, template set, policy or profile.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong state (e.g. backward without a cache).
class StateError : public Error {
 public:
  using Error::Error;
};

// Too many images for one sample.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input files that cannot be read or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

// Data that parses but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// An interleaved prompt references an image slot that has no encoding.
class AssemblyError : public Error {
 public:
  using Error::Error;
};

// A data-forge builder cannot turn a record into a sample.
class BuildError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace idvlm
