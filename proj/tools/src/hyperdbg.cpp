#include "hvsim/hyperdbg.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include <fmt/format.h>

#include "hvsim/error.hpp"

namespace hvsim::hyperdbg {

namespace {

constexpr u8 kAttrText = 0x07;
constexpr u8 kAttrTitle = 0x1F;
constexpr u8 kAttrCurrent = 0x70;
constexpr u32 kRowBytes = kFramebufferColumns * 2;

constexpr std::string_view kHelp[] = {
    "h                     this help",
    "c                     continue",
    "s [n]                 single-step n instructions",
    "r                     registers",
    "b <addr|sym> [proc]   breakpoint",
    "w <addr> [r|w|rw]     watchpoint (4 bytes)",
    "d <id>                delete breakpoint/watchpoint",
    "m <addr> <len>        dump memory",
    "e <addr> <hexbytes>   edit memory",
    "bt                    backtrace",
    "ps                    process list",
    "trace sys on|off      trace system calls",
    "q                     detach debugger and continue",
};

std::vector<std::string> split(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::optional<u32> parse_number(std::string_view tok) {
  u32 v = 0;
  int base = 10;
  if (tok.starts_with("0x") || tok.starts_with("0X")) {
    tok.remove_prefix(2);
    base = 16;
  }
  if (tok.empty()) return std::nullopt;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v, base);
  if (ec != std::errc{} || p != tok.data() + tok.size()) return std::nullopt;
  return v;
}

u32 le32(const std::vector<u8>& b, std::size_t at = 0) {
  return u32(b[at]) | u32(b[at + 1]) << 8 | u32(b[at + 2]) << 16 | u32(b[at + 3]) << 24;
}

// Not an Error the debugger may swallow.
bool fatal(const Error& e) { return e.code() == Errc::ToolTerminated; }

}  // namespace

std::vector<std::string> Backtrace::lines() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    out.push_back(fmt::format("#{} 0x{:08X} {}", i, frames[i].address, frames[i].symbol));
  if (truncated) out.emplace_back("<unwalkable>");
  return out;
}

std::optional<std::string> ScriptedSource::next(ToolApi&, Debugger&) {
  if (pos_ >= lines_.size()) return std::nullopt;
  return lines_[pos_++];
}

Capabilities required_capabilities() {
  Capabilities c;
  c.guest_write = true;
  c.ports = {port::kKeyboardData, port::kKeyboardStatus};
  return c;
}

Debugger::Debugger(Config config) : config_(config) {}

void Debugger::init(ToolApi& api) {
  subscriptions_.push_back(api.subscribe(
      EventKind::IOOperationPort, {{Field::Port, port::kKeyboardData}, {Field::Access, static_cast<u32>(Access::Read)}}));
  subscriptions_.push_back(api.subscribe(EventKind::BreakpointHit));
  subscriptions_.push_back(api.subscribe(EventKind::WatchpointHit));
}

void Debugger::emit(std::string_view line) {
  if (on_output) on_output(line);
}

std::string Debugger::symbolize(ToolApi& api, u32 va) {
  if (const SymbolTable* s = api.symbols()) return s->describe(va);
  return fmt::format("0x{:X}", va);
}

EventOutcome Debugger::on_event(ToolApi& api, const Event& e) {
  if (detached_) return EventOutcome::PassThrough;
  switch (e.kind) {
    case EventKind::IOOperationPort:
      if (mode_ == Mode::Passive && e.port == port::kKeyboardData && e.value == config_.hotkey) {
        banner_ = "hotkey";
        api.request_stop();
        return EventOutcome::Consume;
      }
      return EventOutcome::PassThrough;
    case EventKind::BreakpointHit:
      banner_ = fmt::format("breakpoint #{} at {}", e.id, symbolize(api, e.address));
      if (mode_ == Mode::Interactive) emit(banner_);
      api.request_stop();
      return EventOutcome::PassThrough;
    case EventKind::WatchpointHit:
      banner_ = fmt::format("watchpoint #{} {} 0x{:X} by {}", e.id, to_string(e.access), e.address,
                            symbolize(api, e.instruction));
      if (mode_ == Mode::Interactive) emit(banner_);
      api.request_stop();
      return EventOutcome::PassThrough;
    case EventKind::SyscallEntry:
      emit(fmt::format("syscall {} from 0x{:X} (process 0x{:X})", e.number, e.caller, e.process));
      return EventOutcome::PassThrough;
    default:
      return EventOutcome::PassThrough;
  }
}

void Debugger::on_terminated(std::string_view reason) {
  mode_ = Mode::Passive;
  emit(fmt::format("debugger terminated: {}", reason));
}

void Debugger::on_stop(ToolApi& api) {
  if (detached_) return;
  enter_ui(api);
  leave_ = false;
  while (!leave_) {
    std::optional<std::string> line = source_ ? source_->next(api, *this) : std::nullopt;
    if (!line) break;
    execute(api, *line);
    if (!leave_) paint(api);
  }
  leave_ui(api);
}

// ---------------------------------------------------------------------------
// UI

void Debugger::enter_ui(ToolApi& api) {
  mode_ = Mode::Interactive;
  entered_at_ = api.read_regs().retired;
  // The backup lives in the hidden pool, out of the guest's reach.
  if (!backup_) backup_ = api.pool_allocate(kFramebufferBytes);
  api.pool_write(backup_, api.read_physical(kFramebufferBase, kFramebufferBytes));
  last_output_.clear();
  command_line_.clear();
  emit(fmt::format("-- debug: {} at retired {}", banner_, entered_at_));
  paint(api);
  if (on_mode) on_mode(true);
}

void Debugger::leave_ui(ToolApi& api) {
  api.write_physical(kFramebufferBase, api.pool_read(backup_, kFramebufferBytes));
  mode_ = Mode::Passive;
  banner_.clear();
  if (on_mode) on_mode(false);
}

void Debugger::paint(ToolApi& api) {
  std::vector<std::pair<std::string, u8>> rows(kFramebufferRows, {"", kAttrText});
  const Registers regs = api.read_regs();
  const u32 cur = regs.cr[static_cast<u8>(isa::Cr::Ptbr)];

  rows[0] = {fmt::format(" HyperDbg | {}", banner_), kAttrTitle};
  std::string proc = "process ?";
  try {
    if (auto p = api.guest_os().current()) proc = fmt::format("process {} pid {}", p->name, p->pid);
  } catch (const Error& e) {
    if (fatal(e)) throw;
  }
  rows[1] = {fmt::format(" {}  ptbr 0x{:X}  retired {}", proc, cur, regs.retired), kAttrText};

  rows[2].first = "-- code";
  try {
    const auto lines = api.disassemble(cur, regs.pc, 8);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const bool here = lines[i].address == regs.pc;
      rows[3 + i] = {fmt::format("{} 0x{:08X} {:<28} {}", here ? '>' : ' ', lines[i].address, lines[i].text,
                                 symbolize(api, lines[i].address)),
                     here ? kAttrCurrent : kAttrText};
    }
  } catch (const Error& e) {
    if (fatal(e)) throw;
    rows[3].first = "  <code not mapped>";
  }

  rows[11].first = "-- registers";
  rows[12].first = fmt::format(" pc {:08X}  r0 {:08X}  r1 {:08X}  r2 {:08X}  r3 {:08X}", regs.pc, regs.r[0], regs.r[1],
                               regs.r[2], regs.r[3]);
  rows[13].first = fmt::format("              r4 {:08X}  r5 {:08X}  r6 {:08X}  r7 {:08X}", regs.r[4], regs.r[5],
                               regs.r[6], regs.r[7]);
  rows[14].first = fmt::format(" zf {} nf {} if {} mode {}", int(regs.zf), int(regs.nf), int(regs.interrupts),
                               regs.mode == hvsim::Mode::User ? "user" : "kernel");

  rows[15].first = "-- backtrace";
  const auto bt = backtrace(api).lines();
  for (std::size_t i = 0; i < bt.size() && i < 6; ++i) rows[16 + i].first = " " + bt[i];

  for (std::size_t i = 0; i < last_output_.size() && i < 2; ++i) rows[22 + i].first = last_output_[i];
  rows[24] = {"> " + command_line_, kAttrTitle};

  std::vector<u8> screen(kFramebufferBytes);
  for (u32 r = 0; r < kFramebufferRows; ++r) {
    const auto& [text, attr] = rows[r];
    for (u32 c = 0; c < kFramebufferColumns; ++c) {
      screen[r * kRowBytes + 2 * c] = c < text.size() ? static_cast<u8>(text[c]) : ' ';
      screen[r * kRowBytes + 2 * c + 1] = attr;
    }
  }
  api.write_physical(kFramebufferBase, screen);
}

// ---------------------------------------------------------------------------
// Commands

std::optional<u32> Debugger::parse_address(ToolApi& api, std::string_view tok) {
  if (auto v = parse_number(tok)) return v;
  if (const SymbolTable* s = api.symbols()) return s->find(tok);
  return std::nullopt;
}

std::vector<u8> Debugger::read_guest_view(ToolApi& api, u32 va, std::size_t n) {
  const Registers regs = api.read_regs();
  const u32 cur = regs.cr[static_cast<u8>(isa::Cr::Ptbr)];
  auto bytes = api.guest_read(cur, va, n);
  if (mode_ != Mode::Interactive || !backup_) return bytes;
  // The screen currently shows the debugger; report what the guest put there.
  const bool paging = regs.cr[static_cast<u8>(isa::Cr::Pgen)] & 1;
  for (std::size_t i = 0; i < n; ++i) {
    const u32 a = va + static_cast<u32>(i);
    const u32 pa = paging ? api.walk_page_table(cur, a).physical : a;
    if (pa >= kFramebufferBase && pa < kFramebufferBase + kFramebufferBytes)
      bytes[i] = api.pool_read(backup_ + (pa - kFramebufferBase), 1)[0];
  }
  return bytes;
}

Backtrace Debugger::backtrace(ToolApi& api) {
  Backtrace bt;
  const Registers regs = api.read_regs();
  const u32 cur = regs.cr[static_cast<u8>(isa::Cr::Ptbr)];
  auto word = [&](u32 va) { return le32(api.guest_read(cur, va, 4)); };
  bt.frames.push_back({regs.pc, symbolize(api, regs.pc)});
  try {
    // Stopped before the prologue has built a frame: the return address is
    // still on top of the stack (or just under the pushed r6).
    if (const SymbolTable* s = api.symbols()) {
      if (auto r = s->try_resolve(regs.pc)) {
        std::optional<u32> ret;
        if (r->offset == 0) ret = word(regs.r[7]);
        else if (r->offset == isa::info(isa::Op::Push).length) ret = word(regs.r[7] + 4);
        if (ret) bt.frames.push_back({*ret, symbolize(api, *ret)});
      }
    }
    u32 fp = regs.r[6];
    while (fp != 0 && bt.frames.size() < kMaxFrames) {
      const u32 saved = word(fp);
      if (saved == 0) break;
      if (saved <= fp) {  // frames must move up the stack
        bt.truncated = true;
        break;
      }
      const u32 ret = word(fp + 4);
      bt.frames.push_back({ret, symbolize(api, ret)});
      fp = saved;
    }
  } catch (const Error& e) {
    if (fatal(e)) throw;
    bt.truncated = true;
  }
  return bt;
}

std::optional<u8> Debugger::poll_key(ToolApi& api) {
  if (!(api.port_read(port::kKeyboardStatus) & 1)) return std::nullopt;
  return api.port_read(port::kKeyboardData);
}

void Debugger::detach(ToolApi& api) {
  for (u32 id : breakpoints_) api.remove_breakpoint(id);
  for (u32 id : watchpoints_) api.remove_watchpoint(id);
  for (u32 id : subscriptions_) api.unsubscribe(id);
  if (syscall_sub_) {
    api.trace_syscalls(false);
    api.unsubscribe(*syscall_sub_);
  }
  breakpoints_.clear();
  watchpoints_.clear();
  subscriptions_.clear();
  syscall_sub_.reset();
  detached_ = true;
}

std::vector<std::string> Debugger::execute(ToolApi& api, std::string_view line) {
  std::vector<std::string> out;
  const auto tok = split(line);
  emit(fmt::format("> {}", line));
  auto help = [&](std::string first) {
    out.push_back(std::move(first));
    out.emplace_back("type h for help");
  };
  try {
    if (tok.empty()) {
    } else if (tok[0] == "h") {
      for (auto h : kHelp) out.emplace_back(h);
    } else if (tok[0] == "c") {
      leave_ = true;
    } else if (tok[0] == "q") {
      detach(api);
      out.emplace_back("debugger detached");
      leave_ = true;
    } else if (tok[0] == "s") {
      u32 n = 1;
      if (tok.size() > 1) {
        auto v = parse_number(tok[1]);
        if (!v || *v == 0) throw std::invalid_argument("bad step count");
        n = *v;
      }
      const StepResult r = api.single_step(n);
      out.push_back(fmt::format("stepped {}: retired {} -> {}, pc 0x{:08X} {}", r.retired_after - r.retired_before,
                                r.retired_before, r.retired_after, r.pc, symbolize(api, r.pc)));
      if (r.halted) out.emplace_back("guest halted");
    } else if (tok[0] == "r") {
      const Registers g = api.read_regs();
      out.push_back(fmt::format("pc 0x{:08X}  retired {}  mode {}  if {}", g.pc, g.retired,
                                g.mode == hvsim::Mode::User ? "user" : "kernel", int(g.interrupts)));
      for (int i = 0; i < isa::kRegisterCount; i += 4)
        out.push_back(fmt::format("r{} 0x{:08X}  r{} 0x{:08X}  r{} 0x{:08X}  r{} 0x{:08X}", i, g.r[i], i + 1,
                                  g.r[i + 1], i + 2, g.r[i + 2], i + 3, g.r[i + 3]));
      out.push_back(fmt::format("ptbr 0x{:08X}  zf {} nf {}", g.cr[static_cast<u8>(isa::Cr::Ptbr)], int(g.zf), int(g.nf)));
    } else if (tok[0] == "b") {
      if (tok.size() < 2) throw std::invalid_argument("b needs an address");
      auto va = parse_address(api, tok[1]);
      if (!va) throw std::invalid_argument(fmt::format("unknown address '{}'", tok[1]));
      BreakpointOptions opt;
      if (tok.size() > 2) {
        const auto pid = parse_number(tok[2]);
        for (const auto& p : api.guest_os().processes())
          if (p.name == tok[2] || (pid && p.pid == *pid)) opt.process = p.ptbr;
        if (!opt.process) throw std::invalid_argument(fmt::format("no process '{}'", tok[2]));
      }
      const u32 id = api.set_breakpoint(*va, opt);
      breakpoints_.push_back(id);
      out.push_back(fmt::format("breakpoint #{} at 0x{:X} {}", id, *va, symbolize(api, *va)));
    } else if (tok[0] == "w") {
      if (tok.size() < 2) throw std::invalid_argument("w needs an address");
      auto va = parse_address(api, tok[1]);
      if (!va) throw std::invalid_argument(fmt::format("unknown address '{}'", tok[1]));
      WatchAccess acc = WatchAccess::Write;
      if (tok.size() > 2) {
        if (tok[2] == "r") acc = WatchAccess::Read;
        else if (tok[2] == "w") acc = WatchAccess::Write;
        else if (tok[2] == "rw") acc = WatchAccess::ReadWrite;
        else throw std::invalid_argument("access must be r, w or rw");
      }
      const u32 id = api.set_watchpoint(*va, 4, acc);
      watchpoints_.push_back(id);
      out.push_back(fmt::format("watchpoint #{} on 0x{:X} ({})", id, *va, to_string(acc)));
    } else if (tok[0] == "d") {
      auto id = tok.size() > 1 ? parse_number(tok[1]) : std::nullopt;
      if (!id) throw std::invalid_argument("d needs an id");
      if (auto it = std::find(breakpoints_.begin(), breakpoints_.end(), *id); it != breakpoints_.end()) {
        api.remove_breakpoint(*id);
        breakpoints_.erase(it);
      } else if (auto wt = std::find(watchpoints_.begin(), watchpoints_.end(), *id); wt != watchpoints_.end()) {
        api.remove_watchpoint(*id);
        watchpoints_.erase(wt);
      } else {
        throw std::invalid_argument(fmt::format("no breakpoint or watchpoint #{}", *id));
      }
      out.push_back(fmt::format("deleted #{}", *id));
    } else if (tok[0] == "m") {
      auto va = tok.size() > 1 ? parse_address(api, tok[1]) : std::nullopt;
      auto len = tok.size() > 2 ? parse_number(tok[2]) : std::nullopt;
      if (!va || !len || *len == 0 || *len > 4096) throw std::invalid_argument("m <addr> <len>");
      const auto bytes = read_guest_view(api, *va, *len);
      for (std::size_t i = 0; i < bytes.size(); i += 16) {
        std::string l = fmt::format("0x{:08X}:", *va + i);
        for (std::size_t j = i; j < std::min(bytes.size(), i + 16); ++j) l += fmt::format(" {:02X}", bytes[j]);
        out.push_back(std::move(l));
      }
    } else if (tok[0] == "e") {
      auto va = tok.size() > 2 ? parse_address(api, tok[1]) : std::nullopt;
      if (!va) throw std::invalid_argument("e <addr> <hexbytes>");
      std::string hex;
      for (std::size_t i = 2; i < tok.size(); ++i) hex += tok[i];
      if (hex.starts_with("0x")) hex.erase(0, 2);
      if (hex.empty() || hex.size() % 2) throw std::invalid_argument("hexbytes must be whole bytes");
      std::vector<u8> bytes;
      for (std::size_t i = 0; i < hex.size(); i += 2) {
        u32 b = 0;
        auto [p, ec] = std::from_chars(hex.data() + i, hex.data() + i + 2, b, 16);
        if (ec != std::errc{} || p != hex.data() + i + 2) throw std::invalid_argument("bad hex byte");
        bytes.push_back(static_cast<u8>(b));
      }
      const Registers g = api.read_regs();
      const u32 cur = g.cr[static_cast<u8>(isa::Cr::Ptbr)];
      api.guest_write(cur, *va, bytes);
      // Keep edits of the (hidden) guest screen across the restore.
      const bool paging = g.cr[static_cast<u8>(isa::Cr::Pgen)] & 1;
      for (std::size_t i = 0; i < bytes.size(); ++i) {
        const u32 pa = paging ? api.walk_page_table(cur, *va + static_cast<u32>(i)).physical : *va + static_cast<u32>(i);
        if (pa >= kFramebufferBase && pa < kFramebufferBase + kFramebufferBytes)
          api.pool_write(backup_ + (pa - kFramebufferBase), std::span<const u8>(&bytes[i], 1));
      }
      out.push_back(fmt::format("wrote {} bytes at 0x{:X}", bytes.size(), *va));
    } else if (tok[0] == "bt") {
      out = backtrace(api).lines();
    } else if (tok[0] == "ps") {
      const auto procs = api.guest_os().processes();
      const Registers g = api.read_regs();
      for (const auto& p : procs)
        out.push_back(fmt::format("{} pid {:<3} {:<8} ptbr 0x{:08X} {}",
                                  (p.ptbr & pte::kFrameMask) == (g.cr[0] & pte::kFrameMask) ? '*' : ' ', p.pid, p.name,
                                  p.ptbr, to_string(p.state)));
    } else if (tok[0] == "trace") {
      if (tok.size() != 3 || tok[1] != "sys" || (tok[2] != "on" && tok[2] != "off"))
        throw std::invalid_argument("trace sys on|off");
      const bool on = tok[2] == "on";
      api.trace_syscalls(on);
      if (on && !syscall_sub_) syscall_sub_ = api.subscribe(EventKind::SyscallEntry);
      if (!on && syscall_sub_) {
        api.unsubscribe(*syscall_sub_);
        syscall_sub_.reset();
      }
      out.push_back(fmt::format("syscall tracing {}", on ? "on" : "off"));
    } else {
      help(fmt::format("unknown command '{}'", tok[0]));
    }
  } catch (const Error& e) {
    if (fatal(e)) throw;
    out.push_back(fmt::format("error: {}", e.what()));
  } catch (const std::invalid_argument& e) {
    help(fmt::format("bad command: {}", e.what()));
  }
  for (const auto& l : out) emit(l);
  last_output_ = out.empty() ? std::vector<std::string>{} : std::vector<std::string>{out.front()};
  if (out.size() > 1) last_output_.push_back(out[1]);
  return out;
}

}  // namespace hvsim::hyperdbg
