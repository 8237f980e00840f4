#include <algorithm>

#include <fmt/format.h>

#include "hvsim/error.hpp"
#include "hvsim/framework.hpp"

namespace hvsim {

// ---------------------------------------------------------------------------
// Breakpoint bookkeeping (framework side)

u8 Framework::site_saved(const SoftSite& s) const {
  return s.pool ? machine_.read_phys(s.pool, 1)[0] : s.saved;
}

void Framework::set_site_saved(SoftSite& s, u8 value) {
  if (s.pool) machine_.write_phys(s.pool, std::array<u8, 1>{value});
  else s.saved = value;
}

void Framework::arm(u32 site_pa) {
  auto it = sites_.find(site_pa);
  if (it == sites_.end() || it->second.armed) return;
  SoftSite& s = it->second;
  if (s.breakpoints.empty()) {
    if (s.pool) free_shadow_bytes_.push_back(s.pool);
    sites_.erase(it);
    return;
  }
  set_site_saved(s, machine_.read_phys(site_pa, 1)[0]);
  machine_.write_phys(site_pa, std::array<u8, 1>{isa::kBrkByte});
  s.armed = true;
}

u32 Framework::add_breakpoint(LogicalBreakpoint bp) {
  bp.id = next_id_++;
  if (bp.style == BreakpointStyle::Soft) {
    auto [it, created] = sites_.try_emplace(bp.site);
    it->second.breakpoints.push_back(bp.id);
    if (created) {
      if (!free_shadow_bytes_.empty()) {
        it->second.pool = free_shadow_bytes_.back();
        free_shadow_bytes_.pop_back();
      }
      arm(bp.site);
    }
    // An existing disarmed site is waiting for its post-step re-arm.
  } else {
    guard_.protect(bp.site);
  }
  breakpoints_.emplace(bp.id, bp);
  return bp.id;
}

void Framework::drop_breakpoint(u32 id) {
  auto it = breakpoints_.find(id);
  if (it == breakpoints_.end()) return;
  const LogicalBreakpoint bp = it->second;
  breakpoints_.erase(it);
  if (bp.style == BreakpointStyle::Transparent) {
    guard_.unprotect(bp.site);
    return;
  }
  auto s = sites_.find(bp.site);
  if (s == sites_.end()) return;
  auto& ids = s->second.breakpoints;
  ids.erase(std::remove(ids.begin(), ids.end(), id), ids.end());
  if (!ids.empty()) return;
  // A disarmed site is waiting for its re-arm, which reclaims it instead.
  if (s->second.armed) {
    machine_.write_phys(bp.site, std::array<u8, 1>{site_saved(s->second)});
    if (s->second.pool) free_shadow_bytes_.push_back(s->second.pool);
    sites_.erase(s);
  }
}

u32 Framework::trace_function_at(u32 va, std::string name) {
  if (auto it = traced_functions_.find(va); it != traced_functions_.end()) return it->second;
  const u32 cur = current_process();
  PageWalk w;
  try {
    w = walk(cur, va);
  } catch (const Error&) {
    throw Error(Errc::UnmappedAddress, fmt::format("0x{:X}", va));
  }
  LogicalBreakpoint bp;
  bp.va = va;
  bp.purpose = Purpose::FunctionEntry;
  bp.function = va;
  bp.site = w.physical;
  const u32 id = add_breakpoint(bp);
  traced_functions_[va] = id;
  if (!name.empty()) function_names_[va] = std::move(name);
  return id;
}

void Framework::set_trace_syscalls(bool on) {
  if (!on) {
    if (syscall_gate_bp_) drop_breakpoint(*syscall_gate_bp_);
    syscall_gate_bp_.reset();
    std::vector<u32> exits;
    for (const auto& [id, bp] : breakpoints_)
      if (bp.purpose == Purpose::SyscallExit) exits.push_back(id);
    for (u32 id : exits) drop_breakpoint(id);
    return;
  }
  if (syscall_gate_bp_) return;
  const u32 ivt = machine_.cpu().control(isa::Cr::Ivt);
  const u32 slot = ivt + vec::kSyscall * 4;
  if (u64{slot} + 4 > machine_.memory_size()) throw Error(Errc::GateUnreachable, "IVT out of range");
  const auto raw = guest_phys_read(slot, 4);
  const u32 gate = u32(raw[0]) | u32(raw[1]) << 8 | u32(raw[2]) << 16 | u32(raw[3]) << 24;
  if (gate == 0) throw Error(Errc::GateUnreachable, "no syscall handler installed");
  PageWalk w;
  if (machine_.cpu().paging()) {
    try {
      w = walk(current_process(), gate);
    } catch (const Error&) {
      throw Error(Errc::GateUnreachable, fmt::format("handler 0x{:X} not mapped", gate));
    }
  } else {
    w.physical = gate;
  }
  LogicalBreakpoint bp;
  bp.va = gate;
  bp.purpose = Purpose::SyscallGate;
  bp.site = w.physical;
  syscall_gate_bp_ = add_breakpoint(bp);
}

void Framework::protect_mmio(u32 process) {
  for (u32 slot : mmio_slots_) guard_.unprotect(slot);
  mmio_slots_.clear();
  if (!machine_.cpu().paging()) return;
  // Every leaf entry of the active space that maps a framebuffer page.
  const u32 dir = process & pte::kFrameMask;
  for (u32 di = 0; di < 1024; ++di) {
    const u32 de = guard_.guest_read32(dir + di * 4);
    if (!(de & pte::kPresent)) continue;
    const u32 table = de & pte::kFrameMask;
    if (u64{table} + kPageSize > machine_.memory_size()) continue;
    for (u32 ti = 0; ti < 1024; ++ti) {
      const u32 te = guard_.guest_read32(table + ti * 4);
      if (!(te & pte::kPresent)) continue;
      const u32 frame = te & pte::kFrameMask;
      if (frame + kPageSize > kFramebufferBase && frame < kFramebufferBase + kFramebufferBytes) {
        const u32 slot = table + ti * 4;
        if (mmio_slots_.insert(slot).second) guard_.protect(slot);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// The gate

void ToolApi::gate() { fw_.gate_check(); }

u32 ToolApi::subscribe(EventKind kind, Condition condition) {
  gate();
  for (const auto& p : condition)
    if (!has_field(kind, p.field))
      throw Error(Errc::UnsupportedCondition, fmt::format("{} has no field {}", to_string(kind), to_string(p.field)));
  const u32 id = fw_.next_id_++;
  fw_.subscriptions_.emplace(id, Framework::Subscription{kind, std::move(condition)});
  if (kind == EventKind::IOOperationMmap && fw_.mmio_slots_.empty()) fw_.protect_mmio(fw_.current_process());
  fw_.apply_controls();
  return id;
}

void ToolApi::unsubscribe(u32 id) {
  gate();
  auto it = fw_.subscriptions_.find(id);
  if (it == fw_.subscriptions_.end()) return;
  const bool mmio = it->second.kind == EventKind::IOOperationMmap;
  fw_.subscriptions_.erase(it);
  if (mmio && std::none_of(fw_.subscriptions_.begin(), fw_.subscriptions_.end(),
                           [](const auto& s) { return s.second.kind == EventKind::IOOperationMmap; })) {
    for (u32 slot : fw_.mmio_slots_) fw_.guard_.unprotect(slot);
    fw_.mmio_slots_.clear();
  }
  fw_.apply_controls();
}

u32 ToolApi::set_breakpoint(u32 va, BreakpointOptions options) {
  gate();
  const u32 process = options.process.value_or(fw_.current_process());
  PageWalk w;
  if (!fw_.machine_.cpu().paging() && !options.process) {
    w.physical = va;
  } else {
    try {
      w = fw_.walk(process, va);
    } catch (const Error&) {
      throw Error(Errc::UnmappedAddress, fmt::format("0x{:X}", va));
    }
  }
  for (const auto& [id, bp] : fw_.breakpoints_)
    if (bp.purpose == Framework::Purpose::Plain && bp.va == va && bp.process == options.process)
      throw Error(Errc::DuplicateBreakpoint, fmt::format("0x{:X}", va));
  Framework::LogicalBreakpoint bp;
  bp.va = va;
  bp.process = options.process;
  bp.persistent = options.persistent;
  bp.style = options.style;
  bp.site = options.style == BreakpointStyle::Soft ? w.physical : w.table_slot;
  if (options.style == BreakpointStyle::Transparent && !fw_.machine_.cpu().paging())
    throw Error(Errc::UnmappedAddress, "transparent breakpoints need paging");
  return fw_.add_breakpoint(bp);
}

void ToolApi::remove_breakpoint(u32 id) {
  gate();
  auto it = fw_.breakpoints_.find(id);
  if (it == fw_.breakpoints_.end() || it->second.purpose != Framework::Purpose::Plain)
    throw Error(Errc::NoSuchBreakpoint, std::to_string(id));
  fw_.drop_breakpoint(id);
}

u32 ToolApi::set_watchpoint(u32 va, u32 len, WatchAccess access, std::optional<u32> process) {
  gate();
  if (len == 0) throw Error(Errc::UnmappedAddress, "empty range");
  if (!fw_.machine_.cpu().paging()) throw Error(Errc::UnmappedAddress, "watchpoints need paging");
  const u32 space = process.value_or(fw_.current_process());
  Framework::Watchpoint wp;
  wp.va = va;
  wp.len = len;
  wp.access = access;
  wp.process = process;
  const u32 last = (va + len - 1) & pte::kFrameMask;
  for (u32 page = va & pte::kFrameMask;; page += kPageSize) {
    try {
      wp.slots.push_back(fw_.walk(space, page).table_slot);
    } catch (const Error&) {
      throw Error(Errc::UnmappedAddress, fmt::format("0x{:X}", std::max(page, va)));
    }
    if (page == last) break;
  }
  for (u32 slot : wp.slots) fw_.guard_.protect(slot);
  wp.id = fw_.next_id_++;
  fw_.watchpoints_.emplace(wp.id, wp);
  return wp.id;
}

void ToolApi::remove_watchpoint(u32 id) {
  gate();
  auto it = fw_.watchpoints_.find(id);
  if (it == fw_.watchpoints_.end()) throw Error(Errc::NoSuchBreakpoint, std::to_string(id));
  for (u32 slot : it->second.slots) fw_.guard_.unprotect(slot);
  fw_.watchpoints_.erase(it);
}

u32 ToolApi::trace_function(u32 va) {
  gate();
  std::string name;
  if (fw_.config_.symbols)
    if (auto r = fw_.config_.symbols->try_resolve(va); r && r->offset == 0) name = r->name;
  return fw_.trace_function_at(va, name);
}

u32 ToolApi::trace_function(std::string_view name) {
  gate();
  if (!fw_.config_.symbols) throw Error(Errc::SymbolNotFound, std::string(name));
  return fw_.trace_function_at(fw_.config_.symbols->address(name), std::string(name));
}

void ToolApi::trace_syscalls(bool on) {
  gate();
  fw_.set_trace_syscalls(on);
}

std::vector<u8> ToolApi::guest_read(u32 process, u32 va, std::size_t n) {
  gate();
  return fw_.guest_read(process, va, n);
}

void ToolApi::guest_write(u32 process, u32 va, std::span<const u8> data) {
  gate();
  if (!fw_.caps_.guest_write) throw Error(Errc::WriteAccessDenied, "guestWrite capability not granted");
  const bool identity = !fw_.machine_.cpu().paging() && process == fw_.current_process();
  std::size_t done = 0;
  u32 a = va;
  while (done < data.size()) {
    const std::size_t chunk = std::min<std::size_t>(data.size() - done, kPageSize - (a & (kPageSize - 1)));
    u32 pa = a;
    if (!identity) {
      try {
        pa = fw_.walk(process, a).physical;
      } catch (const Error&) {
        throw Error(Errc::UnmappedGuestAddress, fmt::format("0x{:X}", a));
      }
    }
    fw_.guest_phys_write(pa, data.subspan(done, chunk));
    done += chunk;
    a += static_cast<u32>(chunk);
  }
}

Registers ToolApi::read_regs() {
  gate();
  const auto& c = fw_.machine_.cpu();
  Registers r;
  r.r = c.r;
  r.pc = c.pc;
  r.zf = c.zf;
  r.nf = c.nf;
  r.interrupts = c.interrupts;
  r.mode = c.mode;
  r.cr = c.cr;
  r.retired = c.retired;
  if (fw_.completion_.active && fw_.completion_.write_register) r.r[fw_.completion_.reg] = fw_.completion_.value;
  return r;
}

void ToolApi::write_regs(const Registers& regs) {
  gate();
  if (!fw_.caps_.guest_write) throw Error(Errc::WriteAccessDenied, "guestWrite capability not granted");
  fw_.require_exited();
  fw_.flush_completion();
  auto& c = fw_.machine_.cpu();
  c.r = regs.r;
  c.pc = regs.pc;
  c.zf = regs.zf;
  c.nf = regs.nf;
  c.interrupts = regs.interrupts;
  c.mode = regs.mode;
  c.cr = regs.cr;
}

PageWalk ToolApi::walk_page_table(u32 process, u32 va) {
  gate();
  return fw_.walk(process, va);
}

std::vector<u8> ToolApi::read_physical(u32 pa, std::size_t n) {
  gate();
  return fw_.guest_phys_read(pa, n);
}

void ToolApi::write_physical(u32 pa, std::span<const u8> data) {
  gate();
  if (!fw_.caps_.guest_write) throw Error(Errc::WriteAccessDenied, "guestWrite capability not granted");
  fw_.guest_phys_write(pa, data);
}

StepResult ToolApi::single_step(u32 count) {
  gate();
  return fw_.single_step(count);
}

std::vector<isa::ListingLine> ToolApi::disassemble(u32 process, u32 va, std::size_t count) {
  gate();
  std::vector<isa::ListingLine> out;
  u32 a = va;
  while (out.size() < count) {
    std::vector<u8> bytes;
    for (u32 i = 0; i < 8; ++i) {
      try {
        bytes.push_back(fw_.guest_read(process, a + i, 1)[0]);
      } catch (const Error&) {
        break;
      }
    }
    if (bytes.empty()) break;
    auto line = isa::disassemble(bytes, a, 1);
    const isa::OpInfo* oi = isa::lookup(bytes[0]);
    const u32 len = oi && oi->length <= bytes.size() ? oi->length : 1;
    out.push_back(line.front());
    a += len;
  }
  return out;
}

u8 ToolApi::port_read(u8 port) {
  gate();
  if (!fw_.caps_.ports.contains(port)) throw Error(Errc::PortAccessDenied, fmt::format("0x{:02X}", port));
  return fw_.machine_.port_in(port);
}

u32 ToolApi::current_process() {
  gate();
  return fw_.current_process();
}

void ToolApi::request_stop() {
  gate();
  if (!fw_.interactive_) fw_.stop_requested_ = true;
}

GuestOs ToolApi::guest_os() {
  gate();
  return GuestOs([this](u32 pa, std::size_t n) { return read_physical(pa, n); }, fw_.config_.symbols);
}

const SymbolTable* ToolApi::symbols() const { return fw_.config_.symbols; }

u32 ToolApi::pool_allocate(std::size_t n) {
  gate();
  if (!fw_.guard_.active() || n == 0) throw Error(Errc::PhysicalOutOfBounds, "no hidden pool");
  const u32 pa = fw_.pool_cursor_;
  if (!fw_.guard_.in_pool(pa, n)) throw Error(Errc::PhysicalOutOfBounds, fmt::format("pool exhausted ({} bytes)", n));
  fw_.pool_cursor_ += static_cast<u32>((n + 3) & ~std::size_t{3});
  return pa;
}

void ToolApi::pool_write(u32 pa, std::span<const u8> data) {
  gate();
  fw_.guard_.pool_write(pa, data);
}

std::vector<u8> ToolApi::pool_read(u32 pa, std::size_t n) {
  gate();
  return fw_.guard_.pool_read(pa, n);
}

const Capabilities& ToolApi::capabilities() const { return fw_.caps_; }
u64 ToolApi::api_calls() const { return fw_.api_calls_; }

}  // namespace hvsim
