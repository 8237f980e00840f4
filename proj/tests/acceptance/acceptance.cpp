// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure. Every expected count and tolerance is pinned below; counts are
// exact (zero tolerance) and are also cross-checked against trace oracles.

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "hvsim/error.hpp"
#include "hvsim/framework.hpp"
#include "hvsim/guestos.hpp"
#include "hvsim/hyperdbg.hpp"
#include "oracle.hpp"

using namespace hvsim;
using oracle::Hosted;
using oracle::Recorder;

namespace {

// Pinned expectations.
constexpr u64 kF1Calls = 5;           // call_tree: f1 called from a 5-iteration loop
constexpr u64 kCounterWrites = 7;     // counter_loop: counter incremented 7 times
constexpr u64 kLateLaunchAt = 2000;   // retired count at which the framework is launched
constexpr int kWalkerProbes = 1000;   // minimum randomized probes
constexpr u32 kWalkerSeed = 0x5EED;
constexpr u64 kApiBudget = 100000;
constexpr int kFailOnEvent = 3;
constexpr u64 kHotkeyAt = 5000;
constexpr int kStepCommands = 7;

struct Verdict {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) {
    if (pass) detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::vector<u8> all_ram(const Machine& m) { return m.read_phys(0, m.memory_size()); }

// ---------------------------------------------------------------------------

Verdict non_interference() {
  Verdict v;
  for (const char* name : {"counter_loop", "two_procs", "kbd_echo"}) {
    const auto native = oracle::run_native(guestos::build_fixture(name));
    Hosted h(name);
    Recorder tool;
    h.fw->register_tool(tool);
    h.run();
    v.check(h.m->cpu().halted, fmt::format("{} did not halt", name));
    v.check(tool.events.empty(), fmt::format("{}: {} events with no subscription", name, tool.events.size()));
    v.check(h.fw->guest_digest() == native.digest, fmt::format("{}: digest while loaded differs", name));
    h.fw->unload();
    v.check(h.m->digest() == native.digest, fmt::format("{}: digest after unload differs", name));
    v.note(fmt::format("{} {}", name, to_hex(native.digest).substr(0, 12)));
  }
  return v;
}

Verdict late_launch_round_trip() {
  Verdict v;
  const auto fx = guestos::build_fixture("two_procs");
  const auto native = oracle::run_native(fx);
  const SymbolTable syms = oracle::symbols(fx);

  Machine m = oracle::boot(fx);
  m.run_until_retired(kLateLaunchAt);
  FrameworkConfig cfg;
  cfg.symbols = &syms;
  auto fw = Framework::load(m, cfg);
  Recorder tool;
  ToolApi& api = fw->register_tool(tool);
  // Leave something to undo: a soft and a transparent breakpoint, a watchpoint
  // and process-switch exits (memguard on every directory load).
  api.set_breakpoint(syms.address("timer_isr"));
  api.set_breakpoint(syms.address("syscall_gate"), {.style = BreakpointStyle::Transparent});
  api.set_watchpoint(guestos::kTicks, 4, WatchAccess::Write);
  api.subscribe(EventKind::ProcessSwitch);
  // Preempted entries are host run-budget ends, not guest exits.
  auto guest_exits = [&] {
    std::vector<LedgerEntry> out;
    for (const auto& e : fw->exit_ledger())
      if (e.reason != vmx::Exit::Reason::Preempted) out.push_back(e);
    return out;
  };
  // One run call handles the first guest exit together with any exits the
  // framework needs to finish it (lifted steps, monitor traps).
  while (guest_exits().empty() && !m.cpu().halted) fw->run(1);
  const auto exits = guest_exits();
  v.check(!exits.empty(), "no guest exit taken");
  std::string taken;
  for (const auto& e : exits) taken += fmt::format("{}{}", taken.empty() ? "" : ">", vmx::to_string(e.reason));
  fw->unload();

  // Native twin at the same instruction boundary: memory must be identical.
  Machine twin = oracle::boot(fx);
  twin.run_until_retired(m.cpu().retired);
  for (int i = 0; i < 2 && !(twin.cpu() == m.cpu()); ++i) oracle::native_step(twin);
  v.check(twin.cpu() == m.cpu(), "cpu state differs from twin after unload");
  v.check(all_ram(twin) == all_ram(m), "memory (code bytes / PTEs) not restored exactly");

  m.run(fx.step_budget);
  v.check(m.cpu().halted && m.digest() == native.digest, "digest at HLT differs from never-launched run");
  v.note(fmt::format("launched at {}, exits {}, unloaded at {}", kLateLaunchAt, taken, twin.cpu().retired));
  return v;
}

struct BpRun {
  u64 hits = 0;
  Digest digest{};
};

BpRun breakpoint_run(BreakpointStyle style, bool persistent) {
  Hosted h("call_tree");
  Recorder tool;
  ToolApi& api = h.fw->register_tool(tool);
  api.subscribe(EventKind::BreakpointHit);
  api.set_breakpoint(h.sym("f1"), {.persistent = persistent, .style = style});
  h.run();
  return {tool.count(EventKind::BreakpointHit), h.fw->guest_digest()};
}

Verdict breakpoint_counting() {
  Verdict v;
  const auto fx = guestos::build_fixture("call_tree");
  Machine twin = oracle::boot_to_kmain(fx);
  const auto counts = oracle::count(twin, fx.step_budget);
  const u64 oracle_hits = counts.pc_retired.contains(*fx.image.symbol("f1")) ? counts.pc_retired.at(*fx.image.symbol("f1")) : 0;
  v.check(oracle_hits == kF1Calls, fmt::format("trace oracle counts {} executions of f1", oracle_hits));
  const Digest native = twin.digest();

  for (auto style : {BreakpointStyle::Soft, BreakpointStyle::Transparent}) {
    const auto p = breakpoint_run(style, true);
    const auto once = breakpoint_run(style, false);
    v.check(p.hits == oracle_hits, fmt::format("{} persistent: {} hits", to_string(style), p.hits));
    v.check(once.hits == 1, fmt::format("{} one-shot: {} hits", to_string(style), once.hits));
    v.check(p.digest == native && once.digest == native, fmt::format("{}: guest digest differs", to_string(style)));
  }
  v.note(fmt::format("persistent {} / one-shot 1, soft and transparent", oracle_hits));
  return v;
}

Verdict watchpoint_counting() {
  Verdict v;
  const auto fx = guestos::build_fixture("counter_loop");
  const auto native = oracle::run_native(fx);
  Machine twin = oracle::boot_to_kmain(fx);
  const auto counts = oracle::count(twin, fx.step_budget);
  const u64 oracle_writes = oracle::stores_touching(counts, guestos::kData, 1);
  const u64 page_stores = oracle::stores_touching(counts, guestos::kData & pte::kFrameMask, kPageSize);
  v.check(oracle_writes == kCounterWrites, fmt::format("store oracle counts {} counter writes", oracle_writes));
  v.check(page_stores > oracle_writes, "fixture has no unrelated same-page stores");

  Hosted h("counter_loop");
  Recorder tool;
  ToolApi& api = h.fw->register_tool(tool);
  api.subscribe(EventKind::WatchpointHit);
  const u32 counter = api.set_watchpoint(guestos::kData, 1, WatchAccess::Write);
  const u32 unrelated = api.set_watchpoint(guestos::kData + 0x100, 4, WatchAccess::ReadWrite);
  h.run();
  u64 counter_hits = 0, unrelated_hits = 0;
  for (const auto& e : tool.events) {
    counter_hits += e.id == counter;
    unrelated_hits += e.id == unrelated;
  }
  v.check(counter_hits == oracle_writes, fmt::format("{} counter hits", counter_hits));
  v.check(unrelated_hits == 0, fmt::format("{} hits on the untouched word", unrelated_hits));
  v.check(oracle::log_of(*h.m) == native.log && h.fw->guest_digest() == native.digest, "program output changed");
  v.note(fmt::format("{} hits; {} other same-page stores ignored", counter_hits, page_stores - oracle_writes));
  return v;
}

Verdict walker_equivalence() {
  Verdict v;
  Hosted h("two_procs");
  Recorder tool;
  ToolApi& api = h.fw->register_tool(tool);
  // Perturb the live tables so the walker has something to see through.
  api.subscribe(EventKind::WatchpointHit);
  api.set_watchpoint(guestos::kProcAVa, 4, WatchAccess::Write, guestos::kProcADirectory);
  api.set_breakpoint(h.sym("procB_main"), {.process = guestos::kProcBDirectory, .style = BreakpointStyle::Transparent});
  h.fw->run(2500);

  Machine twin = oracle::boot_to_kmain(h.fx);
  twin.run_until_retired(h.m->cpu().retired);
  for (int i = 0; i < 2 && twin.cpu().pc != h.m->cpu().pc; ++i) oracle::native_step(twin);
  v.check(twin.digest() == h.fw->guest_digest(), "native twin diverged from the guest");

  std::mt19937 rng(kWalkerSeed);
  int probes = 0, agree = 0, reads_equal = 0, perturbed = 0;
  for (u32 dir : {guestos::kProcADirectory, guestos::kProcBDirectory}) {
    const auto pages = oracle::mapped_pages(twin, dir);
    v.check(!pages.empty(), fmt::format("directory 0x{:X} maps nothing", dir));
    if (pages.empty()) continue;
    for (int i = 0; i < kWalkerProbes; ++i) {
      const auto& [page, frame] = pages[rng() % pages.size()];
      const u32 va = page | (rng() % (kPageSize - 3));
      const u32 saved = twin.cpu().control(isa::Cr::Ptbr);
      twin.cpu().control(isa::Cr::Ptbr) = dir;
      const Translation mmu = twin.translate(va, Access::Read, false);
      twin.cpu().control(isa::Cr::Ptbr) = saved;
      const auto ref = oracle::reference_walk(twin, dir, va);
      const PageWalk w = api.walk_page_table(dir, va);
      ++probes;
      if (mmu.ok && ref && w.physical == mmu.physical && *ref == mmu.physical) ++agree;
      if (mmu.ok && api.guest_read(dir, va, 4) == twin.read_phys(mmu.physical, 4)) ++reads_equal;
      if (h.m->read_phys32(w.table_slot) != twin.read_phys32(w.table_slot)) ++perturbed;
    }
  }
  v.check(probes >= 2 * kWalkerProbes, fmt::format("only {} probes", probes));
  v.check(agree == probes, fmt::format("walker disagrees on {} of {} probes", probes - agree, probes));
  v.check(reads_equal == probes, fmt::format("guestRead differs on {} of {} probes", probes - reads_equal, probes));
  v.note(fmt::format("{} probes, {} through altered live entries", probes, perturbed));
  return v;
}

Verdict memguard_map_reserved() {
  Verdict v;
  Hosted h("map_reserved");
  constexpr u32 kSlot = guestos::kTable0 + (guestos::kDemandVa >> 12 & 0x3FF) * 4;
  const u32 reserved_pa = guestos::kReservedMapping & pte::kFrameMask;
  v.check(h.fw->memguard().is_reserved(pte::frame(guestos::kReservedMapping)), "mapped frame is not in the reserved pool");
  const auto hash_before = oracle::sha256_hex(h.m->read_phys(reserved_pa, kPageSize));
  Recorder tool;
  ToolApi& api = h.fw->register_tool(tool);
  h.run();

  // The guest's own load of the slot was stored at kData.
  v.check(h.m->read_phys32(guestos::kData) == guestos::kReservedMapping, "guest read-back of the PTE differs");
  v.check(h.fw->memguard().guest_read32(kSlot) == guestos::kReservedMapping, "guest-visible PTE differs");
  const u32 actual = h.m->read_phys32(kSlot);
  v.check(pte::frame(actual) != pte::frame(guestos::kReservedMapping), "actual PTE still maps the reserved frame");
  v.check(oracle::sha256_hex(h.m->read_phys(reserved_pa, kPageSize)) == hash_before, "reserved frame modified");
  v.check(h.m->read_phys32(guestos::kData + 4) == 0xCAFEBABE, "data did not round-trip");
  v.check(oracle::log_of(*h.m) == "\xBE", "debug output differs");
  const auto via_mapping = api.guest_read(guestos::kKernelDirectory, guestos::kDemandVa, 4);
  v.check(via_mapping == std::vector<u8>{0xBE, 0xBA, 0xFE, 0xCA}, "guestRead through the mapping differs");
  v.note(fmt::format("PTE 0x{:08X} installed as 0x{:08X}", guestos::kReservedMapping, actual));
  return v;
}

Verdict tool_isolation() {
  Verdict v;
  const auto fx = guestos::build_fixture("two_procs");
  const auto native = oracle::run_native(fx);

  {
    Hosted h("two_procs");
    Recorder tool;
    int seen = 0;
    tool.handler = [&](ToolApi&, const Event&) -> EventOutcome {
      if (++seen == kFailOnEvent) throw std::runtime_error("handler fault");
      return EventOutcome::PassThrough;
    };
    ToolApi& api = h.fw->register_tool(tool);
    api.subscribe(EventKind::ProcessSwitch);
    api.set_breakpoint(h.sym("timer_isr"));
    api.subscribe(EventKind::BreakpointHit);
    const auto r = h.run();
    v.check(r == Framework::RunResult::Unloaded && !h.fw->loaded(), "framework still loaded after handler fault");
    v.check(seen == kFailOnEvent, fmt::format("handler ran {} times", seen));
    v.check(!tool.terminated.empty(), "tool not told it was terminated");
    h.m->run(fx.step_budget);
    v.check(h.m->cpu().halted && h.m->digest() == native.digest, "faulting handler: digest differs from native");
  }
  {
    Hosted h("two_procs");
    Recorder tool;
    u64 completed = 0;
    bool stopped = false;
    tool.handler = [&](ToolApi& api, const Event&) -> EventOutcome {
      try {
        for (;;) {
          api.read_regs();
          ++completed;
        }
      } catch (const Error& e) {
        stopped = e.code() == Errc::ToolTerminated;
        throw;
      }
    };
    ToolApi& api = h.fw->register_tool(tool, {}, Budget{kApiBudget, std::chrono::milliseconds(0)});
    api.subscribe(EventKind::ProcessSwitch);
    h.run();
    v.check(stopped && h.fw->tool_terminated(), "runaway handler not terminated");
    v.check(completed == kApiBudget, fmt::format("{} calls completed before termination", completed));
    v.check(!h.fw->loaded(), "framework still loaded after termination");
    h.m->run(fx.step_budget);
    v.check(h.m->cpu().halted && h.m->digest() == native.digest, "runaway handler: guest did not resume cleanly");
  }
  v.note(fmt::format("fault on event {}; budget {} calls", kFailOnEvent, kApiBudget));
  return v;
}

Verdict tracing_counts() {
  Verdict v;
  Hosted h("two_procs");
  Recorder tool;
  ToolApi& api = h.fw->register_tool(tool);
  api.subscribe(EventKind::SyscallEntry);
  api.subscribe(EventKind::ProcessSwitch);
  api.trace_syscalls(true);
  h.run();

  Machine twin = oracle::boot_to_kmain(h.fx);
  const auto counts = oracle::count(twin, h.fx.step_budget);
  const u64 sys = tool.count(EventKind::SyscallEntry), sw = tool.count(EventKind::ProcessSwitch);
  v.check(counts.syscalls > 0 && counts.ptbr_changes > 0, "fixture exercises neither syscalls nor switches");
  v.check(sys == counts.syscalls, fmt::format("SyscallEntry {} vs {} retired SYSCALL", sys, counts.syscalls));
  v.check(sw == counts.ptbr_changes, fmt::format("ProcessSwitch {} vs {} changed PTBR loads", sw, counts.ptbr_changes));
  v.check(h.fw->guest_digest() == twin.digest(), "guest digest differs from native");
  v.note(fmt::format("{} syscalls, {} switches ({} PTBR loads)", sys, sw, counts.ptbr_loads));
  return v;
}

// Captures the raw framebuffer around each interactive phase.
class Probe : public hyperdbg::Debugger {
 public:
  explicit Probe(Machine& m) : m_(m) {}
  void on_stop(ToolApi& api) override {
    before.assign(m_.framebuffer().begin(), m_.framebuffer().end());
    Debugger::on_stop(api);
    after.assign(m_.framebuffer().begin(), m_.framebuffer().end());
    ++stops;
  }
  std::vector<u8> before, after;
  int stops = 0;

 private:
  Machine& m_;
};

class Steps : public hyperdbg::CommandSource {
 public:
  std::optional<std::string> next(ToolApi& api, hyperdbg::Debugger&) override {
    const u64 now = api.read_regs().retired;
    if (!stop_retired) stop_retired = now;
    if (issued > 0) advanced.push_back(now - last);
    last = now;
    if (issued < kStepCommands) {
      ++issued;
      return "s";
    }
    return "c";
  }
  std::optional<u64> stop_retired;
  int issued = 0;
  u64 last = 0;
  std::vector<u64> advanced;
};

class Backtracer : public hyperdbg::CommandSource {
 public:
  std::optional<std::string> next(ToolApi&, hyperdbg::Debugger&) override {
    if (done) return "q";
    done = true;
    return "bt";
  }
  bool done = false;
};

Verdict hyperdbg_session() {
  Verdict v;
  {
    Hosted h("counter_loop", {{kHotkeyAt, hyperdbg::Config{}.hotkey}});
    Probe dbg(*h.m);
    Steps source;
    dbg.set_source(&source);
    dbg.init(h.fw->register_tool(dbg, hyperdbg::required_capabilities(), Budget{kApiBudget, std::chrono::milliseconds(0)}));
    h.run();
    v.check(dbg.stops == 1, fmt::format("{} debug stops", dbg.stops));
    v.check(source.stop_retired == kHotkeyAt,
            fmt::format("debug state entered at retired {}", source.stop_retired.value_or(0)));
    v.check(!dbg.before.empty() && dbg.before == dbg.after, "framebuffer after c differs from before entry");
    v.check(source.advanced.size() == static_cast<std::size_t>(kStepCommands) &&
                std::all_of(source.advanced.begin(), source.advanced.end(), [](u64 d) { return d == 1; }),
            fmt::format("{} s commands did not advance retired by {}", kStepCommands, kStepCommands));
    v.check(h.m->cpu().halted && oracle::log_of(*h.m) == h.fx.expected_log, "guest did not finish after c");
  }
  {
    Hosted h("call_tree");
    hyperdbg::Debugger dbg;
    Backtracer source;
    std::vector<std::string> out;
    dbg.set_source(&source);
    dbg.on_output = [&](std::string_view l) { out.emplace_back(l); };
    ToolApi& api = h.fw->register_tool(dbg, hyperdbg::required_capabilities(), Budget{kApiBudget, std::chrono::milliseconds(0)});
    dbg.init(api);
    api.set_breakpoint(h.sym("f2"));
    h.run();
    std::vector<std::string> names;
    for (const auto& l : out) {
      if (!l.starts_with("#")) continue;
      std::string sym = l.substr(l.rfind(' ') + 1);
      names.push_back(sym.substr(0, sym.find('+')));
    }
    v.check(names == std::vector<std::string>{"f2", "f1", "kmain"}, fmt::format("bt reported [{}]", fmt::join(names, ", ")));
  }
  v.note(fmt::format("stop at {}, {} single steps, bt [f2, f1, kmain]", kHotkeyAt, kStepCommands));
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    int number;
    const char* name;
    Verdict (*run)();
  };
  const Criterion criteria[] = {
      {1, "non-interference", non_interference},
      {2, "late-launch/unload round trip", late_launch_round_trip},
      {3, "breakpoint counting", breakpoint_counting},
      {4, "watchpoint counting", watchpoint_counting},
      {5, "walker equivalence", walker_equivalence},
      {6, "memguard (map_reserved)", memguard_map_reserved},
      {7, "tool isolation", tool_isolation},
      {8, "tracing counts", tracing_counts},
      {9, "hyperdbg scripted session", hyperdbg_session},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.check(false, fmt::format("exception: {}", e.what()));
    }
    failed += !v.pass;
    std::printf("[%s] %d %s: %s\n", v.pass ? "PASS" : "FAIL", c.number, c.name, v.detail.c_str());
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
