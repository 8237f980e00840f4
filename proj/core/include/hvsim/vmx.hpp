#pragma once

#include <bitset>
#include <deque>
#include <functional>
#include <string>

#include "hvsim/machine.hpp"

namespace hvsim::vmx {

/// Which guest events leave non-root mode. A clear bit never produces an exit.
struct ExecutionControls {
  std::bitset<vec::kCount> exception_bitmap;
  std::bitset<256> io_bitmap;
  bool ptbr_write_exit = false;
  bool external_interrupt_exit = false;
  /// Exit after the next guest instruction completes (retires, or its
  /// fault/trap is delivered to the guest).
  bool monitor_trap = false;

  friend bool operator==(const ExecutionControls&, const ExecutionControls&) = default;
};

struct Exit {
  enum class Reason : u8 {
    Exception,
    ExternalInterrupt,
    IoPort,
    PtbrWrite,
    Hlt,
    MonitorTrap,
    Shutdown,   // unrecoverable guest fault (double fault)
    Preempted,  // host-side run budget exhausted; not a guest event
  };

  Reason reason = Reason::Preempted;
  u32 at = 0;  // pc of the causing instruction (not yet retired)
  // Exception
  u8 vector = 0;
  u32 error_code = 0;
  u32 fault_address = 0;
  u8 trap_length = 0;
  // ExternalInterrupt
  int line = -1;
  // IoPort
  u8 port = 0;
  Access access = Access::Read;
  u8 reg = 0;
  u32 value = 0;  // register value for writes
  u8 length = 0;  // instruction length
  // PtbrWrite
  u32 new_value = 0;
  u32 old_value = 0;
  std::string diagnostic;
};

std::string_view to_string(Exit::Reason reason);

struct Injection {
  u8 vector;
  u32 error_code = 0;
  u32 fault_address = 0;
  u8 trap_length = 0;
};

struct Resume {
  enum class Kind : u8 { None, Retry, Skip } kind = Kind::None;
  u32 length = 0;

  static Resume none() { return {}; }
  static Resume retry() { return {Kind::Retry, 0}; }
  static Resume skip(u32 len) { return {Kind::Skip, len}; }
};

/// The per-guest control structure. Owns the guest for its lifetime; the
/// machine is handed back by unload().
class Vmcs {
 public:
  using ReadPatcher = std::function<void(u32 physical, std::span<u8> bytes)>;

  /// Migrate a running machine into a guest without changing any guest state.
  static Vmcs late_launch(Machine& machine, const ExecutionControls& controls);

  Vmcs(Vmcs&&) noexcept = default;
  Vmcs& operator=(Vmcs&&) noexcept = default;
  Vmcs(const Vmcs&) = delete;
  Vmcs& operator=(const Vmcs&) = delete;

  /// Run the guest until the next configured exit, or until max_steps
  /// machine steps have elapsed (Preempted).
  Exit run(u64 max_steps = ~u64{0});
  void resume(Resume action);

  void set_controls(const ExecutionControls& controls);
  const ExecutionControls& controls() const { return controls_; }

  void queue_injection(const Injection& injection);
  bool has_pending_injections() const { return !injections_.empty(); }

  /// Complete the instruction at pc while exited (host emulated it).
  void skip_instruction(u32 length);
  /// Execute the HLT at pc (retire + halt) while exited.
  void complete_halt();

  Machine& unload();

  bool valid() const { return machine_ != nullptr; }
  bool exited() const { return exited_; }
  const Exit& last_exit() const { return last_exit_; }
  /// Machine steps executed in non-root mode so far.
  u64 steps() const { return steps_; }
  CpuState& guest_state();
  const CpuState& guest_state() const;
  Machine& machine();
  const Machine& machine() const;

  void set_read_patcher(ReadPatcher patcher) { hooks_.patcher = std::move(patcher); }

 private:
  class Hooks : public StepHooks {
   public:
    bool intercept_interrupt(int line) override;
    bool intercept_instruction(const isa::Instruction& instr) override;
    void patch_read(u32 physical, std::span<u8> bytes) override;

    Vmcs* owner = nullptr;
    ReadPatcher patcher;
  };

  Vmcs(Machine& machine, const ExecutionControls& controls);
  void require_valid() const;
  void require_exited() const;
  Exit make_exit(Exit::Reason reason);

  Machine* machine_ = nullptr;
  ExecutionControls controls_;
  std::deque<Injection> injections_;
  Exit last_exit_;
  bool exited_ = false;
  u64 steps_ = 0;
  bool completed_ = false;  // an instruction completed since the last monitor-trap check
  Hooks hooks_;
};

}  // namespace hvsim::vmx
