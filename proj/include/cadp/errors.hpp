#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cadp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf was produced, or a gradient handed to an optimizer was non-finite.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::ptrdiff_t node = -1)
      : Error(what), node_(node) {}
  /// Index of the graph node that produced the value, or -1 if not graph-related.
  std::ptrdiff_t node() const { return node_; }

 private:
  std::ptrdiff_t node_;
};

/// API misuse: backward before forward, unbound inputs, non-scalar roots.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// The function under finite-difference test is not deterministic.
class OracleError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or configuration files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input (checkpoints, IDX files, dataset caches).
class FormatError : public Error {
 public:
  enum class Kind {
    kBadMagic,
    kVersionMismatch,
    kArchitectureMismatch,
    kTruncated,
    kDimensionMismatch,
    kMalformed,
    kIo,
  };
  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace cadp
