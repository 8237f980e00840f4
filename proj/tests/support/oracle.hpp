#pragma once

// Test-side oracles. Everything here observes a natively running Machine and
// never goes through the framework, so it can judge the framework's answers.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hvsim/framework.hpp"
#include "hvsim/guestos.hpp"
#include "hvsim/machine.hpp"

namespace oracle {

using namespace hvsim;

/// One machine step as seen from outside.
struct TraceRecord {
  u64 retired_before = 0;
  bool retired = false;  // the step retired an instruction
  u32 pc = 0;
  int opcode = -1;  // -1: fetch would fault
  std::optional<isa::Instruction> instr;
  u32 ptbr_before = 0;
  u32 ptbr_after = 0;
  std::vector<std::pair<u32, u32>> stores;  // (physical, length) of retired stores
  StepOutcome::Kind outcome = StepOutcome::Kind::Retired;
  u8 vector = 0;  // Fault: delivered exception vector
  int line = -1;  // Interrupted: delivered line
};

using TraceSink = std::function<void(const TraceRecord&)>;

/// One native step, delivering faults to the guest as run() does.
StepOutcome native_step(Machine& m);

/// Step the machine natively until halt or max_steps, reporting every step.
void trace(Machine& m, u64 max_steps, const TraceSink& sink);

struct Counts {
  u64 steps = 0;
  u64 retired = 0;
  std::map<u32, u64> pc_retired;  // pc -> instructions retired there
  u64 syscalls = 0;               // retired opcode 0x16
  u64 ptbr_loads = 0;
  u64 ptbr_changes = 0;           // loads with a changed value
  std::map<int, u64> interrupts;  // line -> deliveries
  std::map<int, u64> exceptions;  // vector -> deliveries (traps included)
  std::vector<TraceRecord> stores;
};

Counts count(Machine& m, u64 max_steps = 50'000'000);
/// Retired stores overlapping [pa, pa+len).
u64 stores_touching(const Counts& c, u32 pa, u32 len);

/// Two-level walk written from the entry format alone (P bit, frame bits).
std::optional<u32> reference_walk(const Machine& m, u32 ptbr, u32 va);
/// Every present (va page, pa frame) pair under a directory.
std::vector<std::pair<u32, u32>> mapped_pages(const Machine& m, u32 ptbr);

/// Fresh machine with the fixture installed (image + default keys).
Machine boot(const guestos::Fixture& f);
/// Boot and run natively until pc reaches kmain.
Machine boot_to_kmain(const guestos::Fixture& f);
SymbolTable symbols(const guestos::Fixture& f);

struct NativeResult {
  Digest digest{};
  std::string log;
  u64 retired = 0;
  bool halted = false;
};
NativeResult run_native(const guestos::Fixture& f);
std::string log_of(const Machine& m);

/// Tool that subscribes to nothing unless told to, and counts what arrives.
class Recorder : public Tool {
 public:
  EventOutcome on_event(ToolApi& api, const Event& e) override;
  void on_terminated(std::string_view reason) override { terminated = std::string(reason); }

  std::function<EventOutcome(ToolApi&, const Event&)> handler;
  std::vector<Event> events;
  std::string terminated;

  u64 count(EventKind kind) const;
};

std::string sha256_hex(std::span<const u8> bytes);

/// A fixture booted natively to kmain, then handed to a loaded framework.
struct Hosted {
  explicit Hosted(std::string_view fixture, std::vector<KeyEvent> extra_keys = {});
  Hosted(const Hosted&) = delete;

  guestos::Fixture fx;
  SymbolTable syms;
  std::unique_ptr<Machine> m;
  std::unique_ptr<Framework> fw;

  u32 sym(std::string_view name) const { return syms.address(name); }
  /// Run under the framework to halt (or budget); returns the result.
  Framework::RunResult run() { return fw->run(fx.step_budget); }
};

}  // namespace oracle
