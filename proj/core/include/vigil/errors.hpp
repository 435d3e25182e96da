#pragma once

#include <stdexcept>
#include <string>

namespace vigil {

// Base class for everything this library throws on purpose. The CLI maps
// subtypes to exit codes; tests match on the concrete type.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension or geometry mismatch between operands.
struct ShapeError : Error {
  using Error::Error;
};

// An index (target class, token position, pair index) out of range.
struct IndexError : Error {
  using Error::Error;
};

// A softmax row with every entry masked out.
struct DegenerateRowError : Error {
  using Error::Error;
};

// Token blocks concatenated out of pair order, or with duplicate pairs.
struct OrderingError : Error {
  using Error::Error;
};

// An annotation timestamp that does not sit on a frame-pair boundary.
struct AlignmentError : Error {
  using Error::Error;
};

// Unknown token id or token string.
struct VocabError : Error {
  using Error::Error;
};

// Low-rank adapter with rank exceeding the target layer.
struct RankError : Error {
  using Error::Error;
};

// A cache or module wired against the wrong configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

// Training diverged; the message carries the offending step index.
struct TrainingError : Error {
  using Error::Error;
};

// Synthetic timeline packing failed after bounded retries.
struct GenerationError : Error {
  using Error::Error;
};

// Bad bytes on disk: schema version, config-hash mismatch, missing artifact.
struct DataError : Error {
  using Error::Error;
};

// A metric requested on inputs where it is undefined.
struct MetricError : Error {
  using Error::Error;
};

}  // namespace vigil
