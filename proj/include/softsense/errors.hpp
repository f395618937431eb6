#pragma once

#include <stdexcept>
#include <string>

namespace softsense {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, stale, or mismatched upstream artifact (CLI exit code 3).
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values during integration or training (CLI exit code 4).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateGeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated binary/text container.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace softsense
