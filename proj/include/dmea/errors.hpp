#pragma once

#include <stdexcept>
#include <string>

namespace dmea {

// Bad arguments to a pure operation (non-finite entries, empty input, shape mismatch).
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A sample violates the encoding contract (missing separator, empty answer region, over-length).
struct InvalidSample : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A stateful structure was queried or mutated outside its contract.
struct InvalidState : std::logic_error {
  using std::logic_error::logic_error;
};

// A routing directive references a module that does not exist.
struct RoutingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training or a whole stage diverged (non-finite loss or gradient).
struct TrainingFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A numeric computation produced non-finite values outside of training.
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// IO errors on checkpoints, traces and reports.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dmea
