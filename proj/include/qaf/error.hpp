#pragma once

#include <stdexcept>
#include <string>

namespace qaf {

// Argument/precondition violations use std::invalid_argument directly.

/// NaN, breakdown, or a non-positive pivot inside a numerical kernel.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Network graph fails shape consistency; carries the offending layer index.
class GraphError : public std::runtime_error {
  public:
    GraphError(int layer, const std::string& what)
        : std::runtime_error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
    int layer() const { return layer_; }

  private:
    int layer_;
};

/// A structural edit (shallow/narrow/pooling/dropout) cannot be applied.
class TransformError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed or incompatible model / config file.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Least-squares fit has fewer than two distinct abscissae.
class FitError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Correlation undefined (zero variance / all ties).
class CorrelationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Training diverged (NaN loss).
class TrainingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace qaf
