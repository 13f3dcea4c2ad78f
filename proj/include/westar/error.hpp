#pragma once

#include <stdexcept>
#include <string>

namespace westar {

enum class ErrorKind {
  Shape,
  Domain,
  Index,
  Config,
  Data,
  Io,
  Numeric,
  State,
};

/// Structured error carried by every failure path in the library.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace westar
