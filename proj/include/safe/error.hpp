#pragma once

#include <stdexcept>
#include <string>

namespace safe {

enum class ErrorKind {
  InvalidArgument,
  Io,
  BadMagic,
  Truncated,
  UnknownDtype,
  Config,
  TypeMismatch,
  ShapeMismatch,
  Data,
  Numerical,
  External,
};

const char* to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, const std::string& what,
                    ErrorKind kind = ErrorKind::InvalidArgument) {
  if (!cond) throw Error(kind, what);
}

}  // namespace safe
