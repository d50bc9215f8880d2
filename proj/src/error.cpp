#include "thoraxdiff/error.hpp"

namespace thoraxdiff {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Format: return "format";
    case ErrorKind::NumericHealth: return "numeric-health";
    case ErrorKind::InsufficientData: return "insufficient-data";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Dimension:
    case ErrorKind::Domain:
    case ErrorKind::Format:
    case ErrorKind::InsufficientData:
    case ErrorKind::Degenerate: return 3;
    case ErrorKind::NumericHealth: return 4;
    case ErrorKind::Io: return 5;
  }
  return 1;
}

}  // namespace thoraxdiff
