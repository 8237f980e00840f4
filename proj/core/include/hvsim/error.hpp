#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hvsim {

enum class Errc {
  // isa
  OperandOutOfRange,
  UnknownOpcode,
  TruncatedInstruction,
  InvalidOperand,
  SyntaxError,
  UndefinedLabel,
  DuplicateLabel,
  // machine
  PhysicalOutOfBounds,
  // vmx
  AlreadyLaunched,
  NotExited,
  NotRunning,
  InvalidVmcs,
  PendingWorkRemains,
  // memguard
  FrameInUse,
  MalformedDirectory,
  SubstitutePoolExhausted,
  // core
  AlreadyLoaded,
  NotLoaded,
  ToolAlreadyRegistered,
  NoToolRegistered,
  UnsupportedCondition,
  UnmappedAddress,
  DuplicateBreakpoint,
  NoSuchBreakpoint,
  SymbolNotFound,
  GateUnreachable,
  UnmappedGuestAddress,
  WriteAccessDenied,
  NotMapped,
  PortAccessDenied,
  ToolTerminated,
  // osdep
  UnsupportedGuest,
  CorruptList,
  NoSuchProcess,
  // guestos / cli
  UnknownFixture,
  ImageFormat,
  ScriptParseError,
  BindFailure,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure surfaced by the library is an Error carrying one Errc.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
        code_(code) {}
  explicit Error(Errc code) : Error(code, {}) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace hvsim
