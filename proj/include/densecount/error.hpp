#pragma once

#include <stdexcept>
#include <string>

namespace densecount {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke an operation's precondition (shapes, modes, ranges).
struct UsageError : Error {
  using Error::Error;
};

// Malformed text input; the message names the line.
struct ParseError : Error {
  using Error::Error;
};

// Well-formed input that violates a domain invariant.
struct ValidationError : Error {
  using Error::Error;
};

// Binary file (DMAP, PNG) that does not decode.
struct FormatError : Error {
  using Error::Error;
};

// Checkpoint whose magic, version or parameter shapes do not match.
struct CheckpointError : Error {
  using Error::Error;
};

// Checkpoint that decodes but was written for a different network config.
struct ShapeAuditError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// k-NN distance requested with fewer than two points.
struct InsufficientNeighborsError : Error {
  using Error::Error;
};

// Scene generator could not place objects under the separation constraint.
struct InfeasibleSpecError : Error {
  using Error::Error;
};

// NaN/Inf produced by a numeric op or by training.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace densecount
