#include "hvsim/vmx.hpp"

#include "hvsim/error.hpp"

namespace hvsim::vmx {

using isa::Op;

std::string_view to_string(Exit::Reason reason) {
  switch (reason) {
    case Exit::Reason::Exception: return "Exception";
    case Exit::Reason::ExternalInterrupt: return "ExternalInterrupt";
    case Exit::Reason::IoPort: return "IoPort";
    case Exit::Reason::PtbrWrite: return "PtbrWrite";
    case Exit::Reason::Hlt: return "Hlt";
    case Exit::Reason::MonitorTrap: return "MonitorTrap";
    case Exit::Reason::Shutdown: return "Shutdown";
    case Exit::Reason::Preempted: return "Preempted";
  }
  return "?";
}

bool Vmcs::Hooks::intercept_interrupt(int line) {
  if (!owner->controls_.external_interrupt_exit) return false;
  // Acknowledged at exit; the root side reinjects it.
  owner->machine_->clear_irq(line);
  return true;
}

bool Vmcs::Hooks::intercept_instruction(const isa::Instruction& in) {
  const auto& c = owner->controls_;
  switch (in.op) {
    case Op::In:
    case Op::Out: return c.io_bitmap.test(in.imm & 0xFF);
    case Op::Movcr: return c.ptbr_write_exit && in.a == static_cast<u8>(isa::Cr::Ptbr);
    case Op::Hlt: return true;
    default: return false;
  }
}

void Vmcs::Hooks::patch_read(u32 physical, std::span<u8> bytes) {
  if (patcher) patcher(physical, bytes);
}

Vmcs::Vmcs(Machine& machine, const ExecutionControls& controls) : machine_(&machine), controls_(controls) {}

Vmcs Vmcs::late_launch(Machine& machine, const ExecutionControls& controls) {
  if (machine.virtualized()) throw Error(Errc::AlreadyLaunched);
  machine.set_virtualized(true);
  return Vmcs(machine, controls);
}

void Vmcs::require_valid() const {
  if (machine_ == nullptr) throw Error(Errc::InvalidVmcs);
}

void Vmcs::require_exited() const {
  require_valid();
  if (!exited_) throw Error(Errc::NotExited);
}

Exit Vmcs::make_exit(Exit::Reason reason) {
  Exit e;
  e.reason = reason;
  e.at = machine_->cpu().pc;
  return e;
}

Exit Vmcs::run(u64 max_steps) {
  require_valid();
  if (exited_) throw Error(Errc::NotRunning, "resume before running again");
  hooks_.owner = this;
  Machine& m = *machine_;
  using Kind = StepOutcome::Kind;

  auto leave = [&](Exit e) {
    exited_ = true;
    last_exit_ = e;
    return e;
  };

  for (u64 i = 0; i < max_steps; ++i) {
    if (controls_.monitor_trap && completed_) {
      completed_ = false;
      return leave(make_exit(Exit::Reason::MonitorTrap));
    }
    if (m.cpu().halted) {
      Exit e = make_exit(Exit::Reason::Shutdown);
      e.diagnostic = m.diagnostic();
      return leave(e);
    }
    const StepOutcome o = m.step(&hooks_);
    ++steps_;
    switch (o.kind) {
      case Kind::Retired:
        if (controls_.monitor_trap) completed_ = true;
        break;
      case Kind::Interrupted:
        break;
      case Kind::Halted: {
        Exit e = make_exit(Exit::Reason::Shutdown);
        e.diagnostic = m.diagnostic();
        return leave(e);
      }
      case Kind::Fault:
        if (controls_.exception_bitmap.test(o.vector)) {
          Exit e = make_exit(Exit::Reason::Exception);
          e.vector = o.vector;
          e.error_code = o.error_code;
          e.fault_address = o.fault_address;
          e.trap_length = o.trap_length;
          return leave(e);
        }
        m.inject_exception(o.vector, o.error_code, o.fault_address, o.trap_length);
        if (controls_.monitor_trap) completed_ = true;
        break;
      case Kind::Intercepted: {
        if (o.line >= 0) {
          Exit e = make_exit(Exit::Reason::ExternalInterrupt);
          e.line = o.line;
          return leave(e);
        }
        const auto& in = o.instr;
        if (in.op == Op::Hlt) return leave(make_exit(Exit::Reason::Hlt));
        if (in.op == Op::Movcr) {
          Exit e = make_exit(Exit::Reason::PtbrWrite);
          e.new_value = m.cpu().r[in.b];
          e.old_value = m.cpu().control(isa::Cr::Ptbr);
          e.length = in.length();
          return leave(e);
        }
        Exit e = make_exit(Exit::Reason::IoPort);
        e.port = static_cast<u8>(in.imm);
        e.access = in.op == Op::In ? Access::Read : Access::Write;
        e.reg = in.a;
        e.value = m.cpu().r[in.a];
        e.length = in.length();
        return leave(e);
      }
    }
  }
  return leave(make_exit(Exit::Reason::Preempted));
}

void Vmcs::resume(Resume action) {
  require_exited();
  if (action.kind == Resume::Kind::Skip) skip_instruction(action.length);
  Machine& m = *machine_;
  while (!injections_.empty()) {
    const Injection inj = injections_.front();
    injections_.pop_front();
    if (inj.vector >= vec::kTimer) {
      m.deliver_interrupt(inj.vector);
    } else {
      m.inject_exception(inj.vector, inj.error_code, inj.fault_address, inj.trap_length);
      if (controls_.monitor_trap) completed_ = true;
    }
  }
  exited_ = false;
}

void Vmcs::set_controls(const ExecutionControls& controls) {
  require_valid();
  if (controls.monitor_trap && !controls_.monitor_trap) completed_ = false;
  controls_ = controls;
}

void Vmcs::queue_injection(const Injection& injection) {
  require_valid();
  injections_.push_back(injection);
}

void Vmcs::skip_instruction(u32 length) {
  require_exited();
  machine_->skip_instruction(length);
  if (controls_.monitor_trap) completed_ = true;
}

void Vmcs::complete_halt() {
  require_exited();
  machine_->complete_halt();
}

Machine& Vmcs::unload() {
  require_valid();
  if (!injections_.empty()) throw Error(Errc::PendingWorkRemains, "queued injections");
  Machine& m = *machine_;
  m.set_virtualized(false);
  machine_ = nullptr;
  return m;
}

CpuState& Vmcs::guest_state() {
  require_valid();
  return machine_->cpu();
}

const CpuState& Vmcs::guest_state() const {
  require_valid();
  return machine_->cpu();
}

Machine& Vmcs::machine() {
  require_valid();
  return *machine_;
}

const Machine& Vmcs::machine() const {
  require_valid();
  return *machine_;
}

}  // namespace hvsim::vmx
