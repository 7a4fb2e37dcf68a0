#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bineye {

/// Every failure the library reports carries one of these kinds so callers
/// (and the CLI exit-code mapping) can branch without parsing messages.
enum class ErrorKind {
  Io,
  NotElf,
  UnsupportedArch,
  Truncated,
  NoCode,
  UnknownFlag,
  EmptyClass,
  EmptySplit,
  ShapeMismatch,
  EmptyInput,
  BadLabel,
  BadMagic,
  VersionMismatch,
  CorruptPayload,
  BadInput,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "Io";
    case ErrorKind::NotElf: return "NotElf";
    case ErrorKind::UnsupportedArch: return "UnsupportedArch";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::NoCode: return "NoCode";
    case ErrorKind::UnknownFlag: return "UnknownFlag";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::BadLabel: return "BadLabel";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::CorruptPayload: return "CorruptPayload";
    case ErrorKind::BadInput: return "BadInput";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace bineye
