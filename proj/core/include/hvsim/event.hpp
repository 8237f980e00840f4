#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hvsim/machine.hpp"

namespace hvsim {

enum class EventKind : u8 {
  ProcessSwitch,
  Exception,
  Interrupt,
  BreakpointHit,
  WatchpointHit,
  FunctionEntry,
  FunctionExit,
  SyscallEntry,
  SyscallExit,
  IOOperationPort,
  IOOperationMmap,
};
inline constexpr int kEventKindCount = 11;

std::string_view to_string(EventKind kind);
std::optional<EventKind> parse_event_kind(std::string_view name);

/// A high-level event. Only the fields meaningful for `kind` are set; the
/// current process (PTBR) is always present.
struct Event {
  EventKind kind = EventKind::Exception;
  u32 process = 0;
  u64 retired = 0;

  u32 instruction = 0;  // faulting / requesting / hitting pc
  u32 address = 0;      // breakpoint va, watched va, MMIO pa, traced function
  u8 vector = 0;
  u32 error_code = 0;
  Access access = Access::Read;
  u32 caller = 0;
  u32 return_address = 0;
  u32 number = 0;  // syscall number
  u8 port = 0;
  u32 value = 0;             // port data read or written
  u32 previous_process = 0;  // ProcessSwitch
  u32 id = 0;                // breakpoint / watchpoint id
  std::string function;      // symbol, when known

  std::string describe() const;
};

enum class Field : u8 { Process, Instruction, Address, Vector, ErrorCode, Access, Number, Port, Id };
std::string_view to_string(Field f);

struct Predicate {
  Field field;
  u32 value;
};

/// Conjunction of equality predicates.
using Condition = std::vector<Predicate>;

/// Whether an event kind carries the field (UnsupportedCondition otherwise).
bool has_field(EventKind kind, Field field);
u32 field_value(const Event& e, Field field);
bool matches(const Condition& c, const Event& e);

enum class EventOutcome : u8 { PassThrough, Consume };

}  // namespace hvsim
