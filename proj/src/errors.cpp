#include "keydyn/errors.hpp"

namespace keydyn {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Argument: return "argument";
    case ErrorKind::Config: return "config";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Protocol: return "protocol";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace keydyn
