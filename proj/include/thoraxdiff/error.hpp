#pragma once

#include <stdexcept>
#include <string>

namespace thoraxdiff {

// Failure categories. The CLI maps each category onto a process exit code.
enum class ErrorKind {
  Config,         // invalid configuration or usage
  Dimension,      // shape/channel mismatch between operands
  Domain,         // value outside its admissible set (labels, masks, distances)
  Format,         // malformed or inconsistent file contents
  NumericHealth,  // non-finite values during computation
  InsufficientData,
  Degenerate,     // geometrically or statistically degenerate input
  Io,             // filesystem failure
};

const char* to_string(ErrorKind kind) noexcept;

// Exit code convention: 2 usage/config, 3 data/format, 4 numeric-health, 5 I/O.
int exit_code(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Numeric-health failure that remembers the step at which it was detected.
class NumericError : public Error {
 public:
  NumericError(long step, const std::string& message)
      : Error(ErrorKind::NumericHealth,
              message + (step >= 0 ? " (step " + std::to_string(step) + ")" : "")),
        step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace thoraxdiff
