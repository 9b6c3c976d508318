#pragma once

#include <stdexcept>
#include <string>

namespace vox {

enum class ErrorKind {
  dimension,    // tensor/argument shape mismatch
  config,       // invalid or inconsistent configuration
  format,       // malformed file content
  io,           // filesystem failure
  state,        // operation not valid in the current state
  unsupported,  // operation not available for this configuration
  invariant,    // internal contract violated
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

}  // namespace vox
