#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace nodedrop {

// Base of every library error. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
public:
  using Error::Error;
};

// Violated precondition (bad argument, stale cache, mismatched report).
class ContractError : public Error {
public:
  using Error::Error;
};

// Malformed input file (bad magic, wrong record size, truncation).
class FormatError : public Error {
public:
  using Error::Error;
};

// Checkpoint written by an incompatible format version.
class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

// Checkpoint payload disagrees with its manifest.
class CorruptionError : public FormatError {
public:
  using FormatError::FormatError;
};

// Model topology cannot carry the dead-node certificate.
class StructuralError : public Error {
public:
  using Error::Error;
};

// Compaction would leave a layer with no live nodes.
class DegenerateLayerError : public Error {
public:
  DegenerateLayerError(const std::string& what, std::vector<std::size_t> layers)
      : Error(what), layers_(std::move(layers)) {}
  const std::vector<std::size_t>& layers() const { return layers_; }

private:
  std::vector<std::size_t> layers_;
};

// Non-finite loss or activation during training.
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace nodedrop
