#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hvsim/event.hpp"
#include "hvsim/machine.hpp"
#include "hvsim/memguard.hpp"
#include "hvsim/osdep.hpp"
#include "hvsim/vmx.hpp"

namespace hvsim {

class Framework;
class ToolApi;

enum class BreakpointStyle : u8 { Soft, Transparent };
enum class WatchAccess : u8 { Read = 1, Write = 2, ReadWrite = 3 };

std::string_view to_string(BreakpointStyle s);
std::string_view to_string(WatchAccess a);

struct BreakpointOptions {
  std::optional<u32> process;  // any process when unset
  bool persistent = true;
  BreakpointStyle style = BreakpointStyle::Soft;
};

struct Capabilities {
  bool guest_write = false;
  std::set<u8> ports;  // portRead allowlist
};

struct Budget {
  u64 max_api_calls = 100000;
  std::chrono::milliseconds max_wall_clock{250};  // zero disables the watchdog
};

struct Registers {
  std::array<u32, isa::kRegisterCount> r{};
  u32 pc = 0;
  bool zf = false;
  bool nf = false;
  bool interrupts = false;
  Mode mode = Mode::Kernel;
  std::array<u32, isa::kControlRegisterCount> cr{};
  u64 retired = 0;
};

struct PageWalk {
  u32 physical = 0;
  u32 flags = 0;  // leaf entry flag bits
  u32 directory_entry = 0;
  u32 table_entry = 0;
  u32 table_slot = 0;  // physical address of the leaf entry
};

struct StepResult {
  u64 retired_before = 0;
  u64 retired_after = 0;
  u32 pc = 0;
  bool halted = false;
};

/// Analysis tool. Runs inside the trap gate: every framework call it makes
/// is counted, permission-checked and watched by the watchdog.
class Tool {
 public:
  virtual ~Tool() = default;
  virtual EventOutcome on_event(ToolApi& api, const Event& event) = 0;
  /// Interactive phase, requested from on_event via ToolApi::request_stop().
  /// Runs with the guest stopped at a clean instruction boundary.
  virtual void on_stop(ToolApi& /*api*/) {}
  virtual void on_terminated(std::string_view /*reason*/) {}
};

/// What happened to one exit (audit trail; no exit may go unaccounted).
struct LedgerEntry {
  enum class Disposition : u8 { Abstracted, Internal, Reinjected, Completed, Preempted };
  vmx::Exit::Reason reason;
  u32 at = 0;
  u8 detail = 0;  // vector / port / line
  Disposition disposition = Disposition::Internal;
  u32 events = 0;
};

std::string_view to_string(LedgerEntry::Disposition d);

struct FrameworkConfig {
  /// Frames for the hidden pool; defaults to the top 16 frames of RAM.
  std::optional<std::vector<u32>> reserved;
  const SymbolTable* symbols = nullptr;
};

/// The trap gate: the only way a tool reaches the framework.
class ToolApi {
 public:
  explicit ToolApi(Framework& fw) : fw_(fw) {}

  u32 subscribe(EventKind kind, Condition condition = {});
  void unsubscribe(u32 id);

  u32 set_breakpoint(u32 va, BreakpointOptions options = {});
  void remove_breakpoint(u32 id);
  u32 set_watchpoint(u32 va, u32 len, WatchAccess access, std::optional<u32> process = std::nullopt);
  void remove_watchpoint(u32 id);
  u32 trace_function(u32 va);
  u32 trace_function(std::string_view name);
  void trace_syscalls(bool on);

  std::vector<u8> guest_read(u32 process, u32 va, std::size_t n);
  void guest_write(u32 process, u32 va, std::span<const u8> data);
  Registers read_regs();
  void write_regs(const Registers& regs);
  PageWalk walk_page_table(u32 process, u32 va);
  std::vector<u8> read_physical(u32 pa, std::size_t n);
  void write_physical(u32 pa, std::span<const u8> data);
  StepResult single_step(u32 count = 1);
  std::vector<isa::ListingLine> disassemble(u32 process, u32 va, std::size_t count);
  u8 port_read(u8 port);

  u32 current_process();
  void request_stop();
  /// OS-dependent queries, mediated through read_physical.
  GuestOs guest_os();
  const SymbolTable* symbols() const;

  // Hidden-pool storage for tool state that must stay out of guest reach.
  u32 pool_allocate(std::size_t n);
  void pool_write(u32 pa, std::span<const u8> data);
  std::vector<u8> pool_read(u32 pa, std::size_t n);

  const Capabilities& capabilities() const;
  u64 api_calls() const;

 private:
  void gate();
  Framework& fw_;
};

class Framework {
 public:
  enum class RunResult : u8 { Halted, StepLimit, Unloaded };

  static std::unique_ptr<Framework> load(Machine& machine, FrameworkConfig config = {});
  ~Framework();
  Framework(const Framework&) = delete;
  Framework& operator=(const Framework&) = delete;

  /// Always succeeds; leaves the guest running natively.
  void unload();
  bool loaded() const { return loaded_; }

  ToolApi& register_tool(Tool& tool, Capabilities caps = {}, Budget budget = {});
  bool tool_terminated() const { return tool_terminated_; }
  const std::string& termination_reason() const { return termination_reason_; }

  /// Run the guest for at most max_steps machine steps.
  RunResult run(u64 max_steps = ~u64{0});

  Machine& machine() { return machine_; }
  const vmx::ExecutionControls& controls() const;
  MemGuard& memguard() { return guard_; }
  const std::vector<LedgerEntry>& exit_ledger() const { return ledger_; }
  u64 events_delivered() const { return events_delivered_; }

  /// Memory as the guest believes it to be (no breakpoint bytes, original
  /// PTEs, hidden frames as they were).
  std::vector<PhysPatch> guest_view_overlay();
  Digest guest_digest();

  // Framework-side services shared with the tool API (no gate).
  std::vector<u8> guest_phys_read(u32 pa, std::size_t n);
  void guest_phys_write(u32 pa, std::span<const u8> data);
  PageWalk walk(u32 process, u32 va);
  std::vector<u8> guest_read(u32 process, u32 va, std::size_t n);
  u32 current_process() const;

 private:
  friend class ToolApi;

  enum class Purpose : u8 { Plain, FunctionEntry, FunctionExit, SyscallGate, SyscallExit };

  struct LogicalBreakpoint {
    u32 id = 0;
    u32 va = 0;
    std::optional<u32> process;
    bool persistent = true;
    BreakpointStyle style = BreakpointStyle::Soft;
    Purpose purpose = Purpose::Plain;
    u32 expected_sp = 0;  // one-shot exits
    u32 number = 0;       // syscall number for SyscallExit
    u32 function = 0;     // traced function
    u32 site = 0;         // soft: code byte pa; transparent: leaf slot
  };
  struct SoftSite {
    u32 pool = 0;  // hidden-pool byte holding the original, or 0
    u8 saved = 0;  // host copy when there is no pool
    bool armed = false;
    std::vector<u32> breakpoints;
  };
  struct Watchpoint {
    u32 id = 0;
    u32 va = 0;
    u32 len = 0;
    WatchAccess access = WatchAccess::Write;
    std::optional<u32> process;
    std::vector<u32> slots;
  };
  struct Subscription {
    EventKind kind;
    Condition condition;
  };
  struct PendingCompletion {
    bool active = false;
    bool write_register = false;
    u8 reg = 0;
    u32 value = 0;
    u32 length = 0;
  };

  Framework(Machine& machine, FrameworkConfig config);

  // exit handling
  void handle_exit(const vmx::Exit& exit);
  void handle_exception(const vmx::Exit& exit, LedgerEntry& entry);
  void handle_soft_breakpoint(u32 site_pa, LedgerEntry& entry);
  void handle_page_fault(const vmx::Exit& exit, LedgerEntry& entry);
  void handle_io(const vmx::Exit& exit, LedgerEntry& entry);
  void handle_ptbr(const vmx::Exit& exit, LedgerEntry& entry);
  void breakpoint_events(const std::vector<u32>& ids, std::vector<Event>& out);
  void finish_exit();
  void flush_completion();
  void run_post_step();
  void maybe_interactive();
  void apply_controls();
  vmx::ExecutionControls compute_controls() const;

  // events and the gate
  bool wanted(const Event& e) const;
  EventOutcome dispatch(Event e, LedgerEntry* entry);
  void deliver_all(std::vector<Event>& events, LedgerEntry& entry);
  void gate_check();
  void terminate_tool(const std::string& reason);
  Event make_event(EventKind kind) const;

  // breakpoints
  u32 add_breakpoint(LogicalBreakpoint bp);
  void drop_breakpoint(u32 id);
  void arm(u32 site_pa);
  u8 site_saved(const SoftSite& s) const;
  void set_site_saved(SoftSite& s, u8 value);
  u32 trace_function_at(u32 va, std::string name);
  void set_trace_syscalls(bool on);
  void protect_mmio(u32 process);

  Translation guest_translate(u32 ptbr, u32 va, Access access, bool as_user);
  StepResult single_step(u32 count);
  void require_loaded() const;
  void require_exited() const;

  Machine& machine_;
  FrameworkConfig config_;
  MemGuard guard_;
  std::optional<vmx::Vmcs> vmcs_;
  bool loaded_ = false;

  Tool* tool_ = nullptr;
  std::unique_ptr<ToolApi> api_;
  Capabilities caps_;
  Budget budget_;
  bool tool_terminated_ = false;
  std::string termination_reason_;
  u64 api_calls_ = 0;
  int gate_depth_ = 0;
  class Watchdog;
  std::unique_ptr<Watchdog> watchdog_;

  std::map<u32, Subscription> subscriptions_;
  u32 next_id_ = 1;
  std::map<u32, LogicalBreakpoint> breakpoints_;
  std::map<u32, SoftSite> sites_;  // keyed by code-byte physical address
  std::map<u32, Watchpoint> watchpoints_;
  std::set<u32> mmio_slots_;
  std::optional<u32> syscall_gate_bp_;
  std::map<u32, u32> traced_functions_;  // va -> breakpoint id
  std::map<u32, std::string> function_names_;

  // pool
  u32 pool_cursor_ = 0;
  std::vector<u32> free_shadow_bytes_;

  std::vector<std::function<void()>> post_step_;
  PendingCompletion completion_;
  int stepping_ = 0;
  bool stop_requested_ = false;
  bool interactive_ = false;
  bool halted_ = false;

  std::vector<LedgerEntry> ledger_;
  u64 events_delivered_ = 0;
};

}  // namespace hvsim
