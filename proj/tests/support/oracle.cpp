#include "oracle.hpp"

#include <algorithm>

#include <openssl/evp.h>

#include "hvsim/error.hpp"

namespace oracle {

StepOutcome native_step(Machine& m) {
  const auto o = m.step();
  if (o.kind == StepOutcome::Kind::Fault) m.inject_exception(o.vector, o.error_code, o.fault_address, o.trap_length);
  return o;
}

void trace(Machine& m, u64 max_steps, const TraceSink& sink) {
  for (u64 i = 0; i < max_steps && !m.cpu().halted; ++i) {
    TraceRecord r;
    r.retired_before = m.cpu().retired;
    r.pc = m.cpu().pc;
    r.ptbr_before = m.cpu().control(isa::Cr::Ptbr);
    std::vector<u8> bytes;
    for (u32 k = 0; k < 6; ++k) {
      const Translation t = m.translate(r.pc + k, Access::Execute);
      if (!t.ok) break;
      bytes.push_back(m.read_phys(t.physical, 1)[0]);
    }
    if (!bytes.empty()) r.opcode = bytes[0];
    try {
      r.instr = isa::decode(bytes).instr;
    } catch (const Error&) {
    }
    std::vector<std::pair<u32, u32>> stores;
    for (const auto& a : m.footprint()) {
      if (a.access != Access::Write) continue;
      const Translation s = m.translate(a.address, Access::Write);
      if (s.ok) stores.emplace_back(s.physical, a.length);
    }
    const StepOutcome o = native_step(m);
    r.outcome = o.kind;
    r.vector = o.vector;
    r.line = o.line;
    r.retired = m.cpu().retired == r.retired_before + 1;
    r.ptbr_after = m.cpu().control(isa::Cr::Ptbr);
    // A store only happened if the instruction went through without faulting.
    if (r.retired && r.opcode != static_cast<int>(isa::Op::Syscall) && r.opcode != isa::kBrkByte) r.stores = std::move(stores);
    sink(r);
  }
}

Counts count(Machine& m, u64 max_steps) {
  Counts c;
  trace(m, max_steps, [&](const TraceRecord& r) {
    ++c.steps;
    if (r.outcome == StepOutcome::Kind::Interrupted) ++c.interrupts[r.line];
    if (r.outcome == StepOutcome::Kind::Fault) ++c.exceptions[r.vector];
    if (!r.retired) return;
    ++c.retired;
    ++c.pc_retired[r.pc];
    if (r.opcode == static_cast<int>(isa::Op::Syscall)) ++c.syscalls;
    if (r.instr && r.instr->op == isa::Op::Movcr && r.instr->a == static_cast<u8>(isa::Cr::Ptbr)) {
      ++c.ptbr_loads;
      if (r.ptbr_after != r.ptbr_before) ++c.ptbr_changes;
    }
    if (!r.stores.empty()) c.stores.push_back(r);
  });
  return c;
}

u64 stores_touching(const Counts& c, u32 pa, u32 len) {
  u64 n = 0;
  for (const auto& r : c.stores)
    for (const auto& [s, l] : r.stores)
      if (s < pa + len && pa < s + l) {
        ++n;
        break;
      }
  return n;
}

std::optional<u32> reference_walk(const Machine& m, u32 ptbr, u32 va) {
  const u32 dir = m.read_phys32((ptbr & 0xFFFFF000u) + (va >> 22) * 4);
  if (!(dir & 1u)) return std::nullopt;
  const u32 leaf = m.read_phys32((dir & 0xFFFFF000u) + ((va >> 12) & 0x3FFu) * 4);
  if (!(leaf & 1u)) return std::nullopt;
  return (leaf & 0xFFFFF000u) | (va & 0xFFFu);
}

std::vector<std::pair<u32, u32>> mapped_pages(const Machine& m, u32 ptbr) {
  std::vector<std::pair<u32, u32>> out;
  for (u32 i = 0; i < 1024; ++i) {
    const u32 dir = m.read_phys32((ptbr & 0xFFFFF000u) + i * 4);
    if (!(dir & 1u)) continue;
    for (u32 j = 0; j < 1024; ++j) {
      const u32 leaf = m.read_phys32((dir & 0xFFFFF000u) + j * 4);
      if (leaf & 1u) out.emplace_back((i << 22) | (j << 12), leaf & 0xFFFFF000u);
    }
  }
  return out;
}

Machine boot(const guestos::Fixture& f) {
  Machine m;
  guestos::install(m, f);
  return m;
}

Machine boot_to_kmain(const guestos::Fixture& f) {
  Machine m = boot(f);
  m.run_until_pc(*f.image.symbol("kmain"), f.step_budget);
  return m;
}

SymbolTable symbols(const guestos::Fixture& f) { return SymbolTable::parse(f.symbols); }

std::string log_of(const Machine& m) { return {m.debug_log().begin(), m.debug_log().end()}; }

NativeResult run_native(const guestos::Fixture& f) {
  Machine m = boot(f);
  m.run(f.step_budget);
  return {m.digest(), log_of(m), m.cpu().retired, m.cpu().halted};
}

EventOutcome Recorder::on_event(ToolApi& api, const Event& e) {
  events.push_back(e);
  return handler ? handler(api, e) : EventOutcome::PassThrough;
}

u64 Recorder::count(EventKind kind) const {
  return static_cast<u64>(std::count_if(events.begin(), events.end(), [&](const Event& e) { return e.kind == kind; }));
}

Hosted::Hosted(std::string_view fixture, std::vector<KeyEvent> extra_keys)
    : fx(guestos::build_fixture(fixture)), syms(SymbolTable::parse(fx.symbols)), m(std::make_unique<Machine>()) {
  guestos::install(*m, fx);
  for (const auto& k : extra_keys) m->schedule_key(k.at_retired, k.scancode);
  m->run_until_pc(syms.address("kmain"), fx.step_budget);
  FrameworkConfig c;
  c.symbols = &syms;
  fw = Framework::load(*m, c);
}

std::string sha256_hex(std::span<const u8> bytes) {
  Digest d{};
  unsigned int n = 0;
  EVP_Digest(bytes.data(), bytes.size(), d.data(), &n, EVP_sha256(), nullptr);
  return to_hex(d);
}

}  // namespace oracle
