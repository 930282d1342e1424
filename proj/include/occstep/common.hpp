#pragma once

#include <stdexcept>
#include <string>

namespace occstep {

// Error taxonomy used across the library. Everything user-facing derives from
// std::runtime_error so the CLI can catch one type and print one line.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};

struct ArgumentError : std::runtime_error {
  explicit ArgumentError(const std::string& m) : std::runtime_error("argument error: " + m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error("data error: " + m) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& m) : std::runtime_error("index error: " + m) {}
};

}  // namespace occstep
