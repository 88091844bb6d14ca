#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tsq {

// Every failure surfaced by the library carries a short machine-parsable
// category so the CLI can report "error category=<cat>: <msg>" and tests can
// match on the failure kind instead of message text.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

// Cholesky pivot failure; remembers which pivot went non-positive.
class SingularError : public Error {
 public:
  SingularError(const std::string& msg, std::size_t pivot_index)
      : Error("singular", msg), pivot_index_(pivot_index) {}

  std::size_t pivot_index() const noexcept { return pivot_index_; }

 private:
  std::size_t pivot_index_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io", msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data", msg) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& msg) : Error("numerical", msg) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state", msg) {}
};

}  // namespace tsq
