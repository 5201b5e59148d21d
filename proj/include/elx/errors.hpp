// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace elx {

// Exit codes used by the CLI. Library code throws the typed exceptions
// below; main() maps them to these codes.
enum ExitCode : int {
  kOk = 0,
  kInternalError = 1,
  kInputError = 2,
  kFormatError = 3,
  kCalibrationError = 4,
  kInfeasibleSloError = 5,
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches in numeric code.
struct DimensionError : InputError {
  using InputError::InputError;
};

// Lookup of an unregistered weight, unknown level, unknown unit.
struct LookupError : InputError {
  using InputError::InputError;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint / bundle / trace (de)serialization problems.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedVersionError : FormatError {
  using FormatError::FormatError;
};

struct CalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a level table cannot meet a requested global fraction.
struct InfeasibleLevelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when no decision in the grid can satisfy an SLO.
struct InfeasibleSloError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Level switch attempted while a request holds a KV cache, or a cache is
// used under a different level than it was built with.
struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BusyError : ConsistencyError {
  using ConsistencyError::ConsistencyError;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace elx
