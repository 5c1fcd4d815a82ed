#pragma once

#include <stdexcept>
#include <string>

namespace tbub {

enum class ErrorKind {
  kDimension,
  kAllMasked,
  kArgument,
  kBudget,
  kInvariant,
  kIo,
  kNonFinite,
  kFormat,
};

const char* to_string(ErrorKind kind);

// Single exception type for every domain failure; `kind` lets callers and
// tests distinguish categories without a class hierarchy.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace tbub
