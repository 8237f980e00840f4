#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "hvsim/isa.hpp"

namespace hvsim {

using u8 = std::uint8_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

inline constexpr std::size_t kDefaultMemory = 16u << 20;
inline constexpr u32 kPageSize = 0x1000;
inline constexpr u32 kResetPc = 0x100;
inline constexpr u32 kResetIvt = 0x400;
inline constexpr u32 kFramebufferBase = 0xB8000;
inline constexpr u32 kFramebufferColumns = 80;
inline constexpr u32 kFramebufferRows = 25;
inline constexpr u32 kFramebufferBytes = kFramebufferColumns * kFramebufferRows * 2;
inline constexpr u32 kDefaultTimerDivisor = 10000;

namespace port {
inline constexpr u8 kTimerDivisor = 0x40;
inline constexpr u8 kKeyboardData = 0x60;
inline constexpr u8 kKeyboardStatus = 0x64;
inline constexpr u8 kDebugConsole = 0xE9;
}  // namespace port

namespace vec {
inline constexpr u8 kBreakpoint = 3;
inline constexpr u8 kSyscall = 8;
inline constexpr u8 kGeneralProtection = 13;
inline constexpr u8 kPageFault = 14;
inline constexpr u8 kTimer = 32;
inline constexpr u8 kKeyboard = 33;
inline constexpr int kCount = 64;
}  // namespace vec

/// Page-table entry bits.
namespace pte {
inline constexpr u32 kPresent = 1u << 0;
inline constexpr u32 kWritable = 1u << 1;
inline constexpr u32 kUser = 1u << 2;
inline constexpr u32 kFrameMask = 0xFFFFF000u;
inline constexpr u32 frame(u32 entry) { return entry >> 12; }
}  // namespace pte

/// Page-fault error code bits.
namespace pf {
inline constexpr u32 kProtection = 1u << 0;
inline constexpr u32 kWrite = 1u << 1;
inline constexpr u32 kUser = 1u << 2;
inline constexpr u32 kExecute = 1u << 3;
}  // namespace pf

/// EFLAGS image saved on exception entry.
namespace eflags {
inline constexpr u32 kZero = 1u << 0;
inline constexpr u32 kNegative = 1u << 1;
inline constexpr u32 kInterrupt = 1u << 2;
}  // namespace eflags

enum class Access : u8 { Read, Write, Execute };
enum class Mode : u8 { Kernel = 0, User = 1 };

std::string_view to_string(Access access);

struct CpuState {
  std::array<u32, isa::kRegisterCount> r{};
  u32 pc = kResetPc;
  bool zf = false;
  bool nf = false;
  Mode mode = Mode::Kernel;
  bool interrupts = false;
  std::array<u32, isa::kControlRegisterCount> cr{0, kResetIvt, 0, 0, 0, 0, 0, 0};
  u64 retired = 0;
  bool halted = false;

  u32 control(isa::Cr c) const { return cr[static_cast<u8>(c)]; }
  u32& control(isa::Cr c) { return cr[static_cast<u8>(c)]; }
  bool paging() const { return (control(isa::Cr::Pgen) & 1u) != 0; }
  u32 flags_image() const;
  friend bool operator==(const CpuState&, const CpuState&) = default;
};

struct Translation {
  bool ok = false;
  u32 physical = 0;
  u32 error_code = 0;
  u32 entry = 0;  // leaf PTE on success
};

struct StepOutcome {
  enum class Kind : u8 { Retired, Interrupted, Fault, Halted, Intercepted };
  Kind kind = Kind::Retired;
  // Fault: vector/error/address; trap_length is 1 for BRK and SYSCALL (the
  // instruction completes when the trap is delivered), 0 for true faults.
  u8 vector = 0;
  u32 error_code = 0;
  u32 fault_address = 0;
  u8 trap_length = 0;
  // Interrupted / Intercepted interrupt line, or -1.
  int line = -1;
  // Intercepted instruction.
  isa::Instruction instr{};
};

/// Root-mode hooks consulted by step(). Interception leaves the machine state
/// exactly as it was before the instruction (or before interrupt delivery).
class StepHooks {
 public:
  virtual ~StepHooks() = default;
  virtual bool intercept_interrupt(int /*line*/) { return false; }
  virtual bool intercept_instruction(const isa::Instruction& /*instr*/) { return false; }
  /// May rewrite bytes returned by guest data loads from physical memory.
  virtual void patch_read(u32 /*physical*/, std::span<u8> /*bytes*/) {}
};

struct PhysPatch {
  u32 physical;
  std::vector<u8> bytes;
};

using Digest = std::array<u8, 32>;
std::string to_hex(const Digest& d);

struct KeyEvent {
  u64 at_retired;
  u8 scancode;
};

/// One memory access performed by an instruction, in guest-virtual terms.
struct MemoryAccess {
  u32 address;
  u32 length;
  Access access;
};

class Machine {
 public:
  explicit Machine(std::size_t memory_bytes = kDefaultMemory);

  CpuState& cpu() { return cpu_; }
  const CpuState& cpu() const { return cpu_; }
  std::size_t memory_size() const { return ram_.size(); }

  void load(const isa::AssembledImage& image);

  /// Execute one instruction or deliver one pending interrupt.
  StepOutcome step(StepHooks* hooks = nullptr);

  /// Native execution: faults are delivered to the guest. Returns retired count.
  u64 run(u64 max_steps = ~u64{0});
  /// Native execution until pc == target at an instruction boundary (or halt/limit).
  bool run_until_pc(u32 target, u64 max_steps = 50'000'000);
  /// Native execution until retired >= target.
  void run_until_retired(u64 target);

  Translation translate(u32 va, Access access, bool as_user) const;
  Translation translate(u32 va, Access access) const { return translate(va, access, cpu_.mode == Mode::User); }

  std::vector<u8> read_phys(u32 pa, std::size_t n) const;
  void write_phys(u32 pa, std::span<const u8> data);
  u32 read_phys32(u32 pa) const;
  void write_phys32(u32 pa, u32 value);

  /// Deliver an exception to the guest as the hardware would. trap_length > 0
  /// first completes the trapping instruction (pc advance + retire).
  void inject_exception(u8 vector, u32 error_code, u32 fault_address, u8 trap_length = 0);
  /// Deliver an external interrupt line immediately (IF is not consulted).
  void deliver_interrupt(int line);
  void raise_irq(int line);
  void clear_irq(int line);
  bool irq_pending(int line) const;

  /// Complete the instruction at pc without executing it: pc += length, retire.
  void skip_instruction(u32 length);
  /// Complete a HLT at pc: retire and halt.
  void complete_halt();

  u8 port_in(u8 port);
  void port_out(u8 port, u8 value);

  void schedule_key(u64 at_retired, u8 scancode);
  void push_key(u8 scancode);
  const std::deque<u8>& keyboard_fifo() const { return kbd_fifo_; }
  bool has_scheduled_keys() const { return !key_schedule_.empty(); }

  const std::vector<u8>& debug_log() const { return debug_log_; }
  std::span<const u8> framebuffer() const { return framebuffer_; }
  u32 timer_divisor() const { return timer_divisor_; }

  /// Memory accesses the instruction at the current pc would perform
  /// (fetch first). Reads instruction bytes through translate(); empty on a
  /// fetch fault.
  std::vector<MemoryAccess> footprint() const;
  /// Footprint of an already-decoded instruction at pc.
  std::vector<MemoryAccess> footprint(const isa::Instruction& instr, u32 pc) const;

  Digest digest() const { return digest({}); }
  /// Digest with physical-memory overlay patches applied (host view untouched).
  Digest digest(std::span<const PhysPatch> overlay) const;

  const std::string& diagnostic() const { return diagnostic_; }

  /// Set while a virtualization layer owns this machine.
  bool virtualized() const { return virtualized_; }
  void set_virtualized(bool v) { virtualized_ = v; }

 private:
  struct Fault {
    u8 vector;
    u32 error_code;
    u32 address;
  };

  bool in_ram(u32 pa, std::size_t n) const { return u64{pa} + n <= ram_.size(); }
  static bool in_framebuffer(u32 pa) { return pa >= kFramebufferBase && pa < kFramebufferBase + kFramebufferBytes; }
  u8 phys_byte(u32 pa) const;
  void set_phys_byte(u32 pa, u8 v);

  bool fetch(u32 va, std::array<u8, 8>& buf, std::size_t& len, Fault& fault) const;
  bool load32(u32 va, u32& value, Fault& fault, StepHooks* hooks) const;
  bool check_store32(u32 va, std::array<u32, 4>& pas, Fault& fault) const;
  void commit_store32(const std::array<u32, 4>& pas, u32 value);

  void retire();
  void drain_key_schedule();
  void enter_handler(u8 vector);
  void set_arith_flags(u32 result);

  CpuState cpu_;
  std::vector<u8> ram_;
  std::vector<u8> framebuffer_;
  u32 timer_divisor_ = kDefaultTimerDivisor;
  std::deque<u8> kbd_fifo_;
  std::deque<KeyEvent> key_schedule_;
  u64 pending_irqs_ = 0;  // bit per line
  std::vector<u8> debug_log_;
  std::string diagnostic_;
  bool virtualized_ = false;
};

}  // namespace hvsim
