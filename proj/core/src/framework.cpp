#include "hvsim/framework.hpp"

#include <algorithm>
#include <condition_variable>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "hvsim/error.hpp"

namespace hvsim {

using vmx::Exit;
using Disposition = LedgerEntry::Disposition;

namespace {
constexpr u64 kNestedStepLimit = 1'000'000;
}

std::string_view to_string(BreakpointStyle s) { return s == BreakpointStyle::Soft ? "soft" : "transparent"; }

std::string_view to_string(WatchAccess a) {
  switch (a) {
    case WatchAccess::Read: return "r";
    case WatchAccess::Write: return "w";
    case WatchAccess::ReadWrite: return "rw";
  }
  return "?";
}

std::string_view to_string(Disposition d) {
  switch (d) {
    case Disposition::Abstracted: return "abstracted";
    case Disposition::Internal: return "internal";
    case Disposition::Reinjected: return "reinjected";
    case Disposition::Completed: return "completed";
    case Disposition::Preempted: return "preempted";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Wall-clock watchdog. Only ever raises a flag; the gate acts on it.

class Framework::Watchdog {
 public:
  Watchdog() : thread_([this] { loop(); }) {}
  ~Watchdog() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

  void arm(std::chrono::milliseconds budget) {
    expired_ = false;
    if (budget.count() <= 0) return;
    {
      std::lock_guard lk(mu_);
      deadline_ = std::chrono::steady_clock::now() + budget;
      armed_ = true;
    }
    cv_.notify_all();
  }

  void disarm() {
    std::lock_guard lk(mu_);
    armed_ = false;
  }

  bool expired() const { return expired_.load(); }

 private:
  void loop() {
    std::unique_lock lk(mu_);
    while (!stop_) {
      if (!armed_) {
        cv_.wait(lk);
        continue;
      }
      const auto deadline = deadline_;
      cv_.wait_until(lk, deadline);
      if (armed_ && deadline_ == deadline && std::chrono::steady_clock::now() >= deadline) {
        expired_ = true;
        armed_ = false;
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::chrono::steady_clock::time_point deadline_;
  bool armed_ = false;
  bool stop_ = false;
  std::atomic<bool> expired_{false};
  std::thread thread_;
};

// ---------------------------------------------------------------------------
// Lifecycle

std::unique_ptr<Framework> Framework::load(Machine& machine, FrameworkConfig config) {
  if (machine.virtualized()) throw Error(Errc::AlreadyLoaded);
  return std::unique_ptr<Framework>(new Framework(machine, std::move(config)));
}

Framework::Framework(Machine& machine, FrameworkConfig config)
    : machine_(machine), config_(std::move(config)), guard_(machine) {
  const auto frames = config_.reserved ? *config_.reserved : MemGuard::default_reserved(machine.memory_size());
  try {
    guard_.reserve(frames);
  } catch (...) {
    guard_.restore_all();
    throw;
  }
  if (guard_.active()) {
    // First pool frame holds breakpoint shadow bytes, the rest is for tools.
    const u32 first = *guard_.reserved().begin() * kPageSize;
    for (u32 i = kPageSize; i-- > 1;) free_shadow_bytes_.push_back(first + i);
    pool_cursor_ = first + kPageSize;
  }
  vmcs_.emplace(vmx::Vmcs::late_launch(machine, compute_controls()));
  vmcs_->set_read_patcher([this](u32 pa, std::span<u8> bytes) { guard_.patch_read(pa, bytes); });
  loaded_ = true;
}

Framework::~Framework() {
  try {
    unload();
  } catch (...) {
  }
}

void Framework::unload() {
  if (!loaded_) return;
  loaded_ = false;
  if (vmcs_->exited()) {
    flush_completion();
    vmcs_->resume(vmx::Resume::none());  // delivers anything still queued
  }
  for (auto& [pa, site] : sites_)
    if (site.armed) machine_.write_phys(pa, std::array<u8, 1>{site_saved(site)});
  sites_.clear();
  breakpoints_.clear();
  watchpoints_.clear();
  mmio_slots_.clear();
  subscriptions_.clear();
  traced_functions_.clear();
  syscall_gate_bp_.reset();
  post_step_.clear();
  guard_.restore_all();
  vmcs_->unload();
  vmcs_.reset();
}

void Framework::require_loaded() const {
  if (!loaded_) throw Error(Errc::NotLoaded);
}

void Framework::require_exited() const {
  require_loaded();
  if (!vmcs_->exited()) throw Error(Errc::NotExited, "guest is not stopped at an exit");
}

const vmx::ExecutionControls& Framework::controls() const {
  require_loaded();
  return vmcs_->controls();
}

ToolApi& Framework::register_tool(Tool& tool, Capabilities caps, Budget budget) {
  require_loaded();
  if (tool_ || tool_terminated_) throw Error(Errc::ToolAlreadyRegistered);
  tool_ = &tool;
  caps_ = std::move(caps);
  budget_ = budget;
  api_ = std::make_unique<ToolApi>(*this);
  if (budget_.max_wall_clock.count() > 0) watchdog_ = std::make_unique<Watchdog>();
  return *api_;
}

u32 Framework::current_process() const { return machine_.cpu().control(isa::Cr::Ptbr); }

// ---------------------------------------------------------------------------
// Controls

vmx::ExecutionControls Framework::compute_controls() const {
  vmx::ExecutionControls c;
  c.exception_bitmap.set(vec::kBreakpoint);
  bool transparent = false;
  for (const auto& [id, bp] : breakpoints_)
    if (bp.style == BreakpointStyle::Transparent) transparent = true;
  if (guard_.active() || transparent || !watchpoints_.empty() || !mmio_slots_.empty())
    c.exception_bitmap.set(vec::kPageFault);
  c.ptbr_write_exit = guard_.active();
  for (const auto& [id, sub] : subscriptions_) {
    auto pred = [&](Field f) -> std::optional<u32> {
      for (const auto& p : sub.condition)
        if (p.field == f) return p.value;
      return std::nullopt;
    };
    switch (sub.kind) {
      case EventKind::Exception:
        if (auto v = pred(Field::Vector); v && *v < 32) c.exception_bitmap.set(*v);
        else
          for (int v2 = 0; v2 < 32; ++v2) c.exception_bitmap.set(v2);
        break;
      case EventKind::IOOperationPort:
        if (auto p = pred(Field::Port); p && *p < 256) c.io_bitmap.set(*p);
        else c.io_bitmap.set();
        break;
      case EventKind::ProcessSwitch: c.ptbr_write_exit = true; break;
      case EventKind::Interrupt: c.external_interrupt_exit = true; break;
      case EventKind::IOOperationMmap: c.ptbr_write_exit = true; break;
      default: break;
    }
  }
  c.monitor_trap = !post_step_.empty() || stepping_ > 0;
  return c;
}

void Framework::apply_controls() {
  if (!loaded_) return;
  const auto c = compute_controls();
  if (!(c == vmcs_->controls())) vmcs_->set_controls(c);
}

// ---------------------------------------------------------------------------
// Run loop

Framework::RunResult Framework::run(u64 max_steps) {
  if (!loaded_) return RunResult::Unloaded;
  const u64 start = vmcs_->steps();
  while (true) {
    if (!loaded_) return RunResult::Unloaded;
    if (halted_ || machine_.cpu().halted) return RunResult::Halted;
    const u64 used = vmcs_->steps() - start;
    // A lifted single step must reach its monitor-trap exit before control
    // returns: until then the live tables are not in their lowered form.
    const bool mid_step = !post_step_.empty();
    if (used >= max_steps && !mid_step) return RunResult::StepLimit;
    apply_controls();
    const Exit exit = vmcs_->run(std::max<u64>(max_steps - std::min(used, max_steps), mid_step ? 1 : 0));
    handle_exit(exit);
    if (!loaded_) return RunResult::Unloaded;
    maybe_interactive();
    if (!loaded_) return RunResult::Unloaded;
    if (machine_.cpu().halted) {
      halted_ = true;
      return RunResult::Halted;
    }
    finish_exit();
  }
}

void Framework::finish_exit() {
  if (!loaded_) return;
  flush_completion();
  apply_controls();
  vmcs_->resume(vmx::Resume::none());
}

void Framework::flush_completion() {
  if (!completion_.active) return;
  completion_.active = false;
  if (completion_.write_register) machine_.cpu().r[completion_.reg] = completion_.value;
  vmcs_->skip_instruction(completion_.length);
}

void Framework::run_post_step() {
  auto actions = std::move(post_step_);
  post_step_.clear();
  for (auto& a : actions) a();
}

void Framework::maybe_interactive() {
  if (!stop_requested_ || !loaded_ || !tool_ || interactive_) return;
  stop_requested_ = false;
  interactive_ = true;
  api_calls_ = 0;
  if (watchdog_) watchdog_->arm(budget_.max_wall_clock);
  ++gate_depth_;
  std::string failure;
  try {
    tool_->on_stop(*api_);
  } catch (const std::exception& e) {
    failure = e.what();
  } catch (...) {
    failure = "unknown failure";
  }
  --gate_depth_;
  if (watchdog_) watchdog_->disarm();
  interactive_ = false;
  if (!failure.empty() || tool_terminated_) terminate_tool(failure.empty() ? termination_reason_ : failure);
}

void Framework::handle_exit(const Exit& exit) {
  LedgerEntry entry{exit.reason, exit.at};
  auto record = [&] { ledger_.push_back(entry); };
  try {
    switch (exit.reason) {
      case Exit::Reason::MonitorTrap:
        run_post_step();
        entry.disposition = Disposition::Internal;
        break;
      case Exit::Reason::Exception:
        entry.detail = exit.vector;
        handle_exception(exit, entry);
        break;
      case Exit::Reason::ExternalInterrupt: {
        entry.detail = static_cast<u8>(exit.line);
        vmcs_->queue_injection({static_cast<u8>(exit.line)});
        entry.disposition = Disposition::Reinjected;
        Event e = make_event(EventKind::Interrupt);
        e.vector = static_cast<u8>(exit.line);
        e.instruction = exit.at;
        std::vector<Event> evs{e};
        deliver_all(evs, entry);
        break;
      }
      case Exit::Reason::IoPort:
        entry.detail = exit.port;
        handle_io(exit, entry);
        break;
      case Exit::Reason::PtbrWrite:
        handle_ptbr(exit, entry);
        break;
      case Exit::Reason::Hlt:
        vmcs_->complete_halt();
        run_post_step();
        halted_ = true;
        entry.disposition = Disposition::Completed;
        break;
      case Exit::Reason::Shutdown:
        halted_ = true;
        entry.disposition = Disposition::Completed;
        break;
      case Exit::Reason::Preempted:
        entry.disposition = Disposition::Preempted;
        break;
    }
  } catch (const Error&) {
    record();
    // Inside a tool (nested stepping) the gate owns recovery.
    if (gate_depth_ > 0) throw;
    terminate_tool("framework failure while handling an exit");
    unload();
    return;
  }
  record();
}

// ---------------------------------------------------------------------------
// Events

Event Framework::make_event(EventKind kind) const {
  Event e;
  e.kind = kind;
  e.process = current_process();
  e.retired = machine_.cpu().retired;
  return e;
}

bool Framework::wanted(const Event& e) const {
  for (const auto& [id, sub] : subscriptions_)
    if (sub.kind == e.kind && matches(sub.condition, e)) return true;
  return false;
}

void Framework::deliver_all(std::vector<Event>& events, LedgerEntry& entry) {
  for (auto& e : events) {
    if (!loaded_) return;
    dispatch(e, &entry);
  }
}

EventOutcome Framework::dispatch(Event e, LedgerEntry* entry) {
  if (!tool_ || tool_terminated_ || !wanted(e)) return EventOutcome::PassThrough;
  if (entry) {
    ++entry->events;
    entry->disposition = Disposition::Abstracted;
  }
  ++events_delivered_;
  if (e.function.empty() && config_.symbols &&
      (e.kind == EventKind::BreakpointHit || e.kind == EventKind::FunctionEntry || e.kind == EventKind::FunctionExit))
    e.function = config_.symbols->describe(e.address);

  const bool outer = gate_depth_ == 0;
  if (outer) {
    api_calls_ = 0;
    if (watchdog_) watchdog_->arm(budget_.max_wall_clock);
  }
  ++gate_depth_;
  EventOutcome out = EventOutcome::PassThrough;
  std::string failure;
  try {
    out = tool_->on_event(*api_, e);
  } catch (const std::exception& ex) {
    failure = ex.what();
  } catch (...) {
    failure = "unknown failure";
  }
  --gate_depth_;
  if (outer && watchdog_) watchdog_->disarm();
  if (failure.empty() && !tool_terminated_) return out;
  if (!outer) throw Error(Errc::ToolTerminated, failure.empty() ? termination_reason_ : failure);
  terminate_tool(failure.empty() ? termination_reason_ : failure);
  return EventOutcome::PassThrough;
}

void Framework::gate_check() {
  require_loaded();
  if (tool_terminated_) throw Error(Errc::ToolTerminated, termination_reason_);
  if (gate_depth_ == 0) return;  // host-side setup is not budgeted
  if (++api_calls_ > budget_.max_api_calls) {
    tool_terminated_ = true;
    termination_reason_ = fmt::format("API call budget of {} exhausted", budget_.max_api_calls);
    throw Error(Errc::ToolTerminated, termination_reason_);
  }
  if (watchdog_ && watchdog_->expired()) {
    tool_terminated_ = true;
    termination_reason_ = fmt::format("wall-clock budget of {} ms exhausted", budget_.max_wall_clock.count());
    throw Error(Errc::ToolTerminated, termination_reason_);
  }
}

void Framework::terminate_tool(const std::string& reason) {
  tool_terminated_ = true;
  if (termination_reason_.empty()) termination_reason_ = reason;
  if (Tool* t = std::exchange(tool_, nullptr)) {
    try {
      t->on_terminated(termination_reason_);
    } catch (...) {
    }
  }
  unload();
}

// ---------------------------------------------------------------------------
// Exit handlers

void Framework::handle_exception(const Exit& exit, LedgerEntry& entry) {
  if (exit.vector == vec::kBreakpoint) {
    const auto t = machine_.translate(exit.at, Access::Execute);
    if (t.ok) {
      auto it = sites_.find(t.physical);
      if (it != sites_.end() && it->second.armed) {
        handle_soft_breakpoint(t.physical, entry);
        return;
      }
    }
  } else if (exit.vector == vec::kPageFault) {
    handle_page_fault(exit, entry);
    return;
  }
  // Raised by the guest itself: it goes back to the guest.
  vmcs_->queue_injection({exit.vector, exit.error_code, exit.fault_address, exit.trap_length});
  entry.disposition = Disposition::Reinjected;
  Event e = make_event(EventKind::Exception);
  e.vector = exit.vector;
  e.instruction = exit.at;
  e.error_code = exit.error_code;
  std::vector<Event> evs{e};
  deliver_all(evs, entry);
}

void Framework::handle_soft_breakpoint(u32 site_pa, LedgerEntry& entry) {
  SoftSite& site = sites_.at(site_pa);
  machine_.write_phys(site_pa, std::array<u8, 1>{site_saved(site)});
  site.armed = false;
  const std::vector<u32> ids = site.breakpoints;

  std::vector<Event> evs;
  breakpoint_events(ids, evs);

  auto it = sites_.find(site_pa);
  if (it != sites_.end()) {
    if (it->second.breakpoints.empty()) {
      if (it->second.pool) free_shadow_bytes_.push_back(it->second.pool);
      sites_.erase(it);
    } else {
      // The original instruction runs once, then the trap byte goes back.
      post_step_.push_back([this, site_pa] { arm(site_pa); });
    }
  }
  entry.disposition = Disposition::Internal;
  deliver_all(evs, entry);
}

void Framework::breakpoint_events(const std::vector<u32>& ids, std::vector<Event>& out) {
  const auto& cpu = machine_.cpu();
  const u32 cur = current_process();
  for (u32 id : ids) {
    auto it = breakpoints_.find(id);
    if (it == breakpoints_.end()) continue;
    const LogicalBreakpoint bp = it->second;
    if (bp.process && (*bp.process & pte::kFrameMask) != (cur & pte::kFrameMask)) continue;
    switch (bp.purpose) {
      case Purpose::Plain: {
        Event e = make_event(EventKind::BreakpointHit);
        e.address = bp.va;
        e.instruction = cpu.pc;
        e.id = bp.id;
        out.push_back(e);
        if (!bp.persistent) drop_breakpoint(id);
        break;
      }
      case Purpose::FunctionEntry: {
        Event e = make_event(EventKind::FunctionEntry);
        e.address = bp.function;
        e.id = bp.id;
        if (auto n = function_names_.find(bp.function); n != function_names_.end()) e.function = n->second;
        try {
          const auto raw = guest_read(cur, cpu.r[7], 4);
          const u32 ret = u32(raw[0]) | u32(raw[1]) << 8 | u32(raw[2]) << 16 | u32(raw[3]) << 24;
          e.return_address = ret;
          e.caller = ret - isa::kCallLength;
          LogicalBreakpoint exit_bp;
          exit_bp.va = ret;
          exit_bp.process = cur;
          exit_bp.persistent = false;
          exit_bp.purpose = Purpose::FunctionExit;
          exit_bp.expected_sp = cpu.r[7] + 4;
          exit_bp.function = bp.function;
          exit_bp.site = walk(cur, ret).physical;
          add_breakpoint(exit_bp);
        } catch (const Error&) {
          // Unreadable stack: entry is still reported, the exit cannot be.
        }
        out.push_back(e);
        break;
      }
      case Purpose::FunctionExit: {
        if (cpu.r[7] != bp.expected_sp) break;  // another activation
        Event e = make_event(EventKind::FunctionExit);
        e.address = bp.function;
        e.return_address = bp.va;
        e.id = bp.id;
        if (auto n = function_names_.find(bp.function); n != function_names_.end()) e.function = n->second;
        out.push_back(e);
        drop_breakpoint(id);
        break;
      }
      case Purpose::SyscallGate: {
        const u32 epc = cpu.control(isa::Cr::Epc);
        Event e = make_event(EventKind::SyscallEntry);
        e.number = cpu.r[0];
        e.return_address = epc;
        e.caller = epc - isa::info(isa::Op::Syscall).length;
        out.push_back(e);
        try {
          LogicalBreakpoint exit_bp;
          exit_bp.va = epc;
          exit_bp.process = cur;
          exit_bp.persistent = false;
          exit_bp.purpose = Purpose::SyscallExit;
          exit_bp.expected_sp = cpu.r[7];
          exit_bp.number = cpu.r[0];
          exit_bp.site = walk(cur, epc).physical;
          add_breakpoint(exit_bp);
        } catch (const Error&) {
        }
        break;
      }
      case Purpose::SyscallExit: {
        if (cpu.r[7] != bp.expected_sp) break;
        Event e = make_event(EventKind::SyscallExit);
        e.number = bp.number;
        e.return_address = bp.va;
        out.push_back(e);
        drop_breakpoint(id);
        break;
      }
    }
  }
}

void Framework::handle_page_fault(const Exit& exit, LedgerEntry& entry) {
  const u32 cur = current_process();
  const u32 va = exit.fault_address;
  const u32 err = exit.error_code;
  const Access access = (err & pf::kExecute) ? Access::Execute : (err & pf::kWrite) ? Access::Write : Access::Read;
  const bool user = (err & pf::kUser) != 0;

  const Translation gt = guest_translate(cur, va, access, user);
  if (!gt.ok) {
    // The guest's own tables fault too: a genuine fault.
    vmcs_->queue_injection({vec::kPageFault, gt.error_code, va, 0});
    entry.disposition = Disposition::Reinjected;
    Event e = make_event(EventKind::Exception);
    e.vector = vec::kPageFault;
    e.instruction = exit.at;
    e.error_code = gt.error_code;
    std::vector<Event> evs{e};
    deliver_all(evs, entry);
    return;
  }

  // Caused by a framework protection. Work out what the instruction touches.
  const u32 pc = exit.at;
  std::vector<MemoryAccess> fp;
  try {
    const auto first = guest_read(cur, pc, 1);
    const isa::OpInfo* oi = isa::lookup(first[0]);
    const auto bytes = guest_read(cur, pc, oi ? oi->length : 1);
    fp = machine_.footprint(isa::decode(bytes).instr, pc);
  } catch (const Error&) {
    fp = {{pc, 1, Access::Execute}};
  }

  std::vector<Event> evs;
  std::vector<u32> bp_ids;
  for (const auto& [id, bp] : breakpoints_)
    if (bp.style == BreakpointStyle::Transparent && bp.va == pc) bp_ids.push_back(id);
  if (!bp_ids.empty()) breakpoint_events(bp_ids, evs);

  const bool mmio = !mmio_slots_.empty();
  for (const auto& a : fp) {
    if (a.access == Access::Execute) continue;
    for (const auto& [id, w] : watchpoints_) {
      if (w.process && (*w.process & pte::kFrameMask) != (cur & pte::kFrameMask)) continue;
      const bool kind_ok = a.access == Access::Write ? (static_cast<u8>(w.access) & 2) : (static_cast<u8>(w.access) & 1);
      if (!kind_ok) continue;
      const u64 lo = std::max<u64>(a.address, w.va);
      const u64 hi = std::min<u64>(u64{a.address} + a.length, u64{w.va} + w.len);
      if (lo >= hi) continue;
      Event e = make_event(EventKind::WatchpointHit);
      e.id = id;
      e.address = static_cast<u32>(lo);
      e.access = a.access;
      e.instruction = pc;
      evs.push_back(e);
    }
    if (mmio) {
      const Translation t = guest_translate(cur, a.address, a.access, user);
      if (t.ok && t.physical >= kFramebufferBase && t.physical < kFramebufferBase + kFramebufferBytes) {
        Event e = make_event(EventKind::IOOperationMmap);
        e.address = t.physical;
        e.access = a.access;
        e.instruction = pc;
        evs.push_back(e);
      }
    }
  }

  // Lift every protection the instruction could run into, run it once, put
  // them back. Page-table stores are folded into the guest view afterwards.
  std::vector<u32> lifted;
  std::vector<std::pair<u32, u32>> stores;
  for (const auto& a : fp) {
    const u32 first_page = a.address & pte::kFrameMask;
    const u32 last_page = (a.address + a.length - 1) & pte::kFrameMask;
    for (u32 page = first_page;; page += kPageSize) {
      try {
        const PageWalk w = walk(cur, page);
        guard_.lift(w.table_slot);
        lifted.push_back(w.table_slot);
      } catch (const Error&) {
      }
      if (page == last_page) break;
    }
    if (a.access == Access::Write)
      for (u32 i = 0; i < a.length; ++i) {
        const Translation t = guest_translate(cur, a.address + i, Access::Write, user);
        if (!t.ok || !guard_.tracks_page(t.physical)) continue;
        // One range per contiguous run: a slot must be reconciled in one go.
        if (!stores.empty() && stores.back().first + stores.back().second == t.physical) ++stores.back().second;
        else stores.emplace_back(t.physical, 1);
      }
  }
  const u64 retired_before = machine_.cpu().retired;
  post_step_.push_back([this, lifted, stores, retired_before] {
    if (machine_.cpu().retired == retired_before + 1)
      for (const auto& [pa, len] : stores) guard_.reconcile_write(pa, len);
    for (u32 slot : lifted) guard_.relower(slot);
  });

  entry.disposition = Disposition::Internal;
  deliver_all(evs, entry);
}

void Framework::handle_io(const Exit& exit, LedgerEntry& entry) {
  Event e = make_event(EventKind::IOOperationPort);
  e.port = exit.port;
  e.access = exit.access;
  e.instruction = exit.at;
  completion_ = PendingCompletion{true, false, exit.reg, 0, exit.length};
  if (exit.access == Access::Read) {
    const u8 v = machine_.port_in(exit.port);
    e.value = v;
    completion_.write_register = true;
    completion_.value = v;
  } else {
    e.value = exit.value & 0xFF;
  }
  entry.disposition = Disposition::Internal;
  const EventOutcome out = dispatch(e, &entry);
  if (!loaded_) return;
  if (exit.access == Access::Read) {
    if (out == EventOutcome::Consume) completion_.value = 0;
  } else if (out != EventOutcome::Consume) {
    machine_.port_out(exit.port, static_cast<u8>(e.value));
  }
}

void Framework::handle_ptbr(const Exit& exit, LedgerEntry& entry) {
  auto& cpu = machine_.cpu();
  const u32 old = exit.old_value;
  const u32 now = exit.new_value;
  cpu.control(isa::Cr::Ptbr) = now;
  vmcs_->skip_instruction(exit.length);
  if (guard_.active()) guard_.on_ptbr_load(now);
  bool mmio_subscribed = false;
  for (const auto& [id, sub] : subscriptions_)
    if (sub.kind == EventKind::IOOperationMmap) mmio_subscribed = true;
  if (mmio_subscribed) protect_mmio(now);
  entry.disposition = Disposition::Internal;
  if (now == old) return;
  Event e = make_event(EventKind::ProcessSwitch);
  e.previous_process = old;
  std::vector<Event> evs{e};
  deliver_all(evs, entry);
}

// ---------------------------------------------------------------------------
// Guest views

Translation Framework::guest_translate(u32 ptbr, u32 va, Access access, bool as_user) {
  if (!machine_.cpu().paging()) return {true, va, 0, 0};
  const u32 base_err = (access == Access::Write ? pf::kWrite : 0) | (as_user ? pf::kUser : 0) |
                       (access == Access::Execute ? pf::kExecute : 0);
  const u64 dir_slot = u64{ptbr & pte::kFrameMask} + (va >> 22) * 4;
  if (dir_slot + 4 > machine_.memory_size()) return {false, 0, base_err, 0};
  const u32 de = guard_.guest_read32(static_cast<u32>(dir_slot));
  if (!(de & pte::kPresent)) return {false, 0, base_err, 0};
  const u64 table_slot = u64{de & pte::kFrameMask} + ((va >> 12) & 0x3FF) * 4;
  if (table_slot + 4 > machine_.memory_size()) return {false, 0, base_err, 0};
  const u32 te = guard_.guest_read32(static_cast<u32>(table_slot));
  if (!(te & pte::kPresent)) return {false, 0, base_err, 0};
  if (as_user && !((de & pte::kUser) && (te & pte::kUser))) return {false, 0, base_err | pf::kProtection, 0};
  if (access == Access::Write && !((de & pte::kWritable) && (te & pte::kWritable)))
    return {false, 0, base_err | pf::kProtection, 0};
  return {true, (te & pte::kFrameMask) | (va & 0xFFF), 0, te};
}

PageWalk Framework::walk(u32 process, u32 va) {
  const u64 dir_slot = u64{process & pte::kFrameMask} + (va >> 22) * 4;
  if (dir_slot + 4 > machine_.memory_size()) throw Error(Errc::NotMapped, "directory");
  const u32 de = guard_.guest_read32(static_cast<u32>(dir_slot));
  if (!(de & pte::kPresent)) throw Error(Errc::NotMapped, "directory");
  const u64 table_slot = u64{de & pte::kFrameMask} + ((va >> 12) & 0x3FF) * 4;
  if (table_slot + 4 > machine_.memory_size()) throw Error(Errc::NotMapped, "table");
  const u32 te = guard_.guest_read32(static_cast<u32>(table_slot));
  if (!(te & pte::kPresent)) throw Error(Errc::NotMapped, "table");
  PageWalk w;
  w.physical = (te & pte::kFrameMask) | (va & 0xFFF);
  w.flags = te & ~pte::kFrameMask;
  w.directory_entry = de;
  w.table_entry = te;
  w.table_slot = static_cast<u32>(table_slot);
  return w;
}

std::vector<u8> Framework::guest_phys_read(u32 pa, std::size_t n) {
  if (u64{pa} + n > machine_.memory_size()) throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{}", pa, n));
  auto out = guard_.guest_phys_read(pa, n);
  for (auto it = sites_.lower_bound(pa); it != sites_.end() && it->first < pa + n; ++it)
    if (it->second.armed) out[it->first - pa] = site_saved(it->second);
  return out;
}

void Framework::guest_phys_write(u32 pa, std::span<const u8> data) {
  if (u64{pa} + data.size() > machine_.memory_size())
    throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{}", pa, data.size()));
  guard_.guest_phys_write(pa, data);
  for (auto it = sites_.lower_bound(pa); it != sites_.end() && it->first < pa + data.size(); ++it) {
    if (!it->second.armed) continue;
    set_site_saved(it->second, data[it->first - pa]);
    machine_.write_phys(it->first, std::array<u8, 1>{isa::kBrkByte});
  }
}

std::vector<u8> Framework::guest_read(u32 process, u32 va, std::size_t n) {
  std::vector<u8> out;
  out.reserve(n);
  const bool identity = !machine_.cpu().paging() && process == current_process();
  u32 a = va;
  while (out.size() < n) {
    const std::size_t chunk = std::min<std::size_t>(n - out.size(), kPageSize - (a & (kPageSize - 1)));
    u32 pa = a;
    if (!identity) {
      try {
        pa = walk(process, a).physical;
      } catch (const Error&) {
        throw Error(Errc::UnmappedGuestAddress, fmt::format("0x{:X}", a));
      }
    }
    std::vector<u8> part;
    try {
      part = guest_phys_read(pa, chunk);
    } catch (const Error&) {
      throw Error(Errc::UnmappedGuestAddress, fmt::format("0x{:X}", a));
    }
    out.insert(out.end(), part.begin(), part.end());
    a += static_cast<u32>(chunk);
  }
  return out;
}

std::vector<PhysPatch> Framework::guest_view_overlay() {
  if (!loaded_) return {};
  auto out = guard_.guest_view_overlay();
  for (const auto& [pa, site] : sites_)
    if (site.armed) out.push_back({pa, {site_saved(site)}});
  return out;
}

Digest Framework::guest_digest() {
  const auto overlay = guest_view_overlay();
  return machine_.digest(overlay);
}

// ---------------------------------------------------------------------------
// Single stepping

StepResult Framework::single_step(u32 count) {
  require_exited();
  StepResult r;
  r.retired_before = machine_.cpu().retired;
  ++stepping_;
  for (u32 i = 0; i < count && loaded_ && !machine_.cpu().halted; ++i) {
    if (completion_.active) {
      // The instruction we are stopped at was already carried out in root
      // mode; completing it is this step.
      flush_completion();
      continue;
    }
    apply_controls();
    vmcs_->resume(vmx::Resume::none());
    while (loaded_) {
      const Exit exit = vmcs_->run(kNestedStepLimit);
      const bool done = exit.reason == Exit::Reason::MonitorTrap || exit.reason == Exit::Reason::Preempted;
      handle_exit(exit);
      if (!loaded_ || done || machine_.cpu().halted) break;
      flush_completion();
      apply_controls();
      vmcs_->resume(vmx::Resume::none());
    }
  }
  --stepping_;
  if (loaded_) apply_controls();
  r.retired_after = machine_.cpu().retired;
  r.pc = machine_.cpu().pc;
  r.halted = machine_.cpu().halted;
  return r;
}

}  // namespace hvsim
