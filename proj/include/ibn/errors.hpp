#pragma once

#include <stdexcept>

namespace ibn {

// Failure classes that the CLI maps to distinct exit codes.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ibn
