#pragma once

#include <stdexcept>
#include <string>

namespace ctphase {

/// Grid dimensions or spacing do not agree between two operands.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A referenced id (organ, phase, parameter name) does not exist.
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A file does not follow the expected on-disk format.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A file is structurally valid but its payload is inconsistent
/// (byte counts, checks, truncation).
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad spec values, non-monotone thresholds,
/// out-of-bounds parameters.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Runtime data problem: missing inputs, insufficient samples,
/// undefined loss, non-finite values during training.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ctphase
