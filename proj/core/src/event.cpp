#include "hvsim/event.hpp"

#include <array>

#include <fmt/format.h>

namespace hvsim {

namespace {
constexpr std::array<std::string_view, kEventKindCount> kKindNames = {
    "ProcessSwitch", "Exception",    "Interrupt",    "BreakpointHit",   "WatchpointHit",   "FunctionEntry",
    "FunctionExit",  "SyscallEntry", "SyscallExit", "IOOperationPort", "IOOperationMmap",
};
}  // namespace

std::string_view to_string(EventKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<EventKind> parse_event_kind(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == name) return static_cast<EventKind>(i);
  return std::nullopt;
}

std::string_view to_string(Field f) {
  switch (f) {
    case Field::Process: return "process";
    case Field::Instruction: return "instruction";
    case Field::Address: return "address";
    case Field::Vector: return "vector";
    case Field::ErrorCode: return "errorCode";
    case Field::Access: return "access";
    case Field::Number: return "number";
    case Field::Port: return "port";
    case Field::Id: return "id";
  }
  return "?";
}

bool has_field(EventKind kind, Field field) {
  if (field == Field::Process) return true;
  switch (kind) {
    case EventKind::ProcessSwitch: return false;
    case EventKind::Exception:
      return field == Field::Vector || field == Field::Instruction || field == Field::ErrorCode;
    case EventKind::Interrupt: return field == Field::Vector || field == Field::Instruction;
    case EventKind::BreakpointHit: return field == Field::Address || field == Field::Id;
    case EventKind::WatchpointHit:
      return field == Field::Address || field == Field::Access || field == Field::Instruction || field == Field::Id;
    case EventKind::FunctionEntry:
    case EventKind::FunctionExit: return field == Field::Address;
    case EventKind::SyscallEntry:
    case EventKind::SyscallExit: return field == Field::Number;
    case EventKind::IOOperationPort: return field == Field::Port || field == Field::Access;
    case EventKind::IOOperationMmap: return field == Field::Address || field == Field::Access;
  }
  return false;
}

u32 field_value(const Event& e, Field field) {
  switch (field) {
    case Field::Process: return e.process;
    case Field::Instruction: return e.instruction;
    case Field::Address: return e.address;
    case Field::Vector: return e.vector;
    case Field::ErrorCode: return e.error_code;
    case Field::Access: return static_cast<u32>(e.access);
    case Field::Number: return e.number;
    case Field::Port: return e.port;
    case Field::Id: return e.id;
  }
  return 0;
}

bool matches(const Condition& c, const Event& e) {
  for (const auto& p : c)
    if (field_value(e, p.field) != p.value) return false;
  return true;
}

std::string Event::describe() const {
  const std::string fn = function.empty() ? fmt::format("0x{:X}", address) : function;
  switch (kind) {
    case EventKind::ProcessSwitch: return fmt::format("ProcessSwitch 0x{:X} -> 0x{:X}", previous_process, process);
    case EventKind::Exception:
      return fmt::format("Exception vector {} at 0x{:X} err 0x{:X}", vector, instruction, error_code);
    case EventKind::Interrupt: return fmt::format("Interrupt {} at 0x{:X}", vector, instruction);
    case EventKind::BreakpointHit: return fmt::format("BreakpointHit #{} at {}", id, fn);
    case EventKind::WatchpointHit:
      return fmt::format("WatchpointHit #{} {} 0x{:X} by 0x{:X}", id, to_string(access), address, instruction);
    case EventKind::FunctionEntry:
      return fmt::format("FunctionEntry {} from 0x{:X} ret 0x{:X}", fn, caller, return_address);
    case EventKind::FunctionExit: return fmt::format("FunctionExit {} ret 0x{:X}", fn, return_address);
    case EventKind::SyscallEntry:
      return fmt::format("SyscallEntry {} from 0x{:X} ret 0x{:X}", number, caller, return_address);
    case EventKind::SyscallExit: return fmt::format("SyscallExit {} ret 0x{:X}", number, return_address);
    case EventKind::IOOperationPort:
      return fmt::format("IOOperationPort 0x{:02X} {} 0x{:02X}", port, to_string(access), value);
    case EventKind::IOOperationMmap: return fmt::format("IOOperationMmap 0x{:X} {}", address, to_string(access));
  }
  return "?";
}

}  // namespace hvsim
