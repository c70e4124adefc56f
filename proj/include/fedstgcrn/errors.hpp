#pragma once

#include <stdexcept>
#include <string>

namespace fedstgcrn {

// Operand shapes do not conform for an op.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A forward op produced NaN or Inf from finite inputs.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (non-scalar root, double backward, ...).
struct AutodiffError : std::logic_error {
  using std::logic_error::logic_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parameter manifests disagree between two bundles or a bundle and a buffer.
struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or truncated byte buffer.
struct CodecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Round protocol failure: disconnect, timeout, unexpected message.
struct FederationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fedstgcrn
