#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace keydyn {

enum class ErrorKind {
  Argument,
  Config,
  Parse,
  Corruption,
  Protocol,
  Numeric,
  Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Base class for every error raised by the library. The kind drives CLI exit
/// codes and HTTP status mapping.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define KEYDYN_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  }

KEYDYN_DEFINE_ERROR(ArgumentError, Argument);
KEYDYN_DEFINE_ERROR(ConfigError, Config);
KEYDYN_DEFINE_ERROR(ParseError, Parse);
KEYDYN_DEFINE_ERROR(CorruptionError, Corruption);
KEYDYN_DEFINE_ERROR(ProtocolError, Protocol);
KEYDYN_DEFINE_ERROR(NumericError, Numeric);
KEYDYN_DEFINE_ERROR(IoError, Io);

#undef KEYDYN_DEFINE_ERROR

}  // namespace keydyn
