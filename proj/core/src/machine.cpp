#include "hvsim/machine.hpp"

#include <algorithm>
#include <bit>
#include <map>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "hvsim/error.hpp"

namespace hvsim {

using isa::Cr;
using isa::Op;

std::string_view to_string(Access access) {
  switch (access) {
    case Access::Read: return "read";
    case Access::Write: return "write";
    case Access::Execute: return "execute";
  }
  return "?";
}

std::string to_hex(const Digest& d) {
  std::string s;
  s.reserve(64);
  for (u8 b : d) s += fmt::format("{:02x}", b);
  return s;
}

u32 CpuState::flags_image() const {
  return (zf ? eflags::kZero : 0) | (nf ? eflags::kNegative : 0) | (interrupts ? eflags::kInterrupt : 0);
}

Machine::Machine(std::size_t memory_bytes) : ram_(memory_bytes, 0), framebuffer_(kFramebufferBytes, 0) {}

void Machine::load(const isa::AssembledImage& image) {
  for (const auto& s : image.sections) write_phys(s.load_address, s.bytes);
  cpu_.pc = image.entry;
}

// ---------------------------------------------------------------------------
// Physical memory

u8 Machine::phys_byte(u32 pa) const { return in_framebuffer(pa) ? framebuffer_[pa - kFramebufferBase] : ram_[pa]; }

void Machine::set_phys_byte(u32 pa, u8 v) {
  if (in_framebuffer(pa)) framebuffer_[pa - kFramebufferBase] = v;
  else ram_[pa] = v;
}

std::vector<u8> Machine::read_phys(u32 pa, std::size_t n) const {
  if (!in_ram(pa, n)) throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{}", pa, n));
  std::vector<u8> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = phys_byte(static_cast<u32>(pa + i));
  return out;
}

void Machine::write_phys(u32 pa, std::span<const u8> data) {
  if (!in_ram(pa, data.size())) throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{}", pa, data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) set_phys_byte(static_cast<u32>(pa + i), data[i]);
}

u32 Machine::read_phys32(u32 pa) const {
  auto b = read_phys(pa, 4);
  return u32(b[0]) | u32(b[1]) << 8 | u32(b[2]) << 16 | u32(b[3]) << 24;
}

void Machine::write_phys32(u32 pa, u32 value) {
  const std::array<u8, 4> b{u8(value), u8(value >> 8), u8(value >> 16), u8(value >> 24)};
  write_phys(pa, b);
}

// ---------------------------------------------------------------------------
// MMU

Translation Machine::translate(u32 va, Access access, bool as_user) const {
  if (!cpu_.paging()) return {true, va, 0, 0};
  const u32 base_err = (access == Access::Write ? pf::kWrite : 0) | (as_user ? pf::kUser : 0) |
                       (access == Access::Execute ? pf::kExecute : 0);
  const u32 dir_slot = (cpu_.control(Cr::Ptbr) & pte::kFrameMask) + (va >> 22) * 4;
  if (!in_ram(dir_slot, 4)) return {false, 0, base_err, 0};
  const u32 de = read_phys32(dir_slot);
  if (!(de & pte::kPresent)) return {false, 0, base_err, 0};
  const u32 table_slot = (de & pte::kFrameMask) + ((va >> 12) & 0x3FF) * 4;
  if (!in_ram(table_slot, 4)) return {false, 0, base_err, 0};
  const u32 te = read_phys32(table_slot);
  if (!(te & pte::kPresent)) return {false, 0, base_err, 0};
  if (as_user && !((de & pte::kUser) && (te & pte::kUser))) return {false, 0, base_err | pf::kProtection, 0};
  if (access == Access::Write && !((de & pte::kWritable) && (te & pte::kWritable)))
    return {false, 0, base_err | pf::kProtection, 0};
  return {true, (te & pte::kFrameMask) | (va & 0xFFF), 0, te};
}

bool Machine::fetch(u32 va, std::array<u8, 8>& buf, std::size_t& len, Fault& fault) const {
  auto byte_at = [&](u32 addr, u8& out) {
    auto t = translate(addr, Access::Execute);
    if (!t.ok) {
      fault = {vec::kPageFault, t.error_code, addr};
      return false;
    }
    if (!in_ram(t.physical, 1)) {
      fault = {vec::kGeneralProtection, 0, addr};
      return false;
    }
    out = phys_byte(t.physical);
    return true;
  };
  if (!byte_at(va, buf[0])) return false;
  const isa::OpInfo* oi = isa::lookup(buf[0]);
  len = oi ? oi->length : 1;
  for (std::size_t i = 1; i < len; ++i)
    if (!byte_at(va + static_cast<u32>(i), buf[i])) return false;
  return true;
}

bool Machine::load32(u32 va, u32& value, Fault& fault, StepHooks* hooks) const {
  value = 0;
  for (u32 i = 0; i < 4; ++i) {
    auto t = translate(va + i, Access::Read);
    if (!t.ok) {
      fault = {vec::kPageFault, t.error_code, va + i};
      return false;
    }
    if (!in_ram(t.physical, 1)) {
      fault = {vec::kGeneralProtection, 0, va + i};
      return false;
    }
    u8 b = phys_byte(t.physical);
    if (hooks) hooks->patch_read(t.physical, std::span<u8>(&b, 1));
    value |= u32(b) << (8 * i);
  }
  return true;
}

bool Machine::check_store32(u32 va, std::array<u32, 4>& pas, Fault& fault) const {
  for (u32 i = 0; i < 4; ++i) {
    auto t = translate(va + i, Access::Write);
    if (!t.ok) {
      fault = {vec::kPageFault, t.error_code, va + i};
      return false;
    }
    if (!in_ram(t.physical, 1)) {
      fault = {vec::kGeneralProtection, 0, va + i};
      return false;
    }
    pas[i] = t.physical;
  }
  return true;
}

void Machine::commit_store32(const std::array<u32, 4>& pas, u32 value) {
  for (u32 i = 0; i < 4; ++i) set_phys_byte(pas[i], static_cast<u8>(value >> (8 * i)));
}

// ---------------------------------------------------------------------------
// Interrupts and exceptions

void Machine::raise_irq(int line) { pending_irqs_ |= u64{1} << line; }
void Machine::clear_irq(int line) { pending_irqs_ &= ~(u64{1} << line); }
bool Machine::irq_pending(int line) const { return (pending_irqs_ >> line) & 1; }

void Machine::retire() {
  ++cpu_.retired;
  if (timer_divisor_ != 0 && cpu_.retired % timer_divisor_ == 0) raise_irq(vec::kTimer);
}

void Machine::enter_handler(u8 vector) {
  const u32 slot = cpu_.control(Cr::Ivt) + 4u * vector;
  const u32 handler = in_ram(slot, 4) ? read_phys32(slot) : 0;
  if (handler == 0) {
    cpu_.halted = true;
    diagnostic_ = fmt::format("double fault: no handler for vector {} at pc 0x{:X}", vector, cpu_.pc);
    return;
  }
  cpu_.control(Cr::Epc) = cpu_.pc;
  cpu_.control(Cr::Eflags) = cpu_.flags_image();
  cpu_.control(Cr::Emode) = static_cast<u32>(cpu_.mode);
  cpu_.interrupts = false;
  cpu_.mode = Mode::Kernel;
  cpu_.pc = handler;
}

void Machine::inject_exception(u8 vector, u32 error_code, u32 fault_address, u8 trap_length) {
  if (trap_length != 0) {
    cpu_.pc += trap_length;
    retire();
  }
  if (vector == vec::kPageFault) {
    cpu_.control(Cr::Far) = fault_address;
    cpu_.control(Cr::Err) = error_code;
  } else if (vector == vec::kGeneralProtection) {
    cpu_.control(Cr::Err) = error_code;
  }
  enter_handler(vector);
}

void Machine::deliver_interrupt(int line) {
  clear_irq(line);
  enter_handler(static_cast<u8>(line));
}

void Machine::skip_instruction(u32 length) {
  cpu_.pc += length;
  retire();
}

void Machine::complete_halt() {
  cpu_.pc += 1;
  retire();
  cpu_.halted = true;
}

// ---------------------------------------------------------------------------
// Devices

u8 Machine::port_in(u8 p) {
  switch (p) {
    case port::kKeyboardData: {
      if (kbd_fifo_.empty()) return 0;
      u8 v = kbd_fifo_.front();
      kbd_fifo_.pop_front();
      if (kbd_fifo_.empty()) clear_irq(vec::kKeyboard);
      else raise_irq(vec::kKeyboard);
      return v;
    }
    case port::kKeyboardStatus:
      return kbd_fifo_.empty() ? 0 : 1;
    default:
      return 0;
  }
}

void Machine::port_out(u8 p, u8 value) {
  switch (p) {
    case port::kTimerDivisor: timer_divisor_ = value; break;
    case port::kDebugConsole: debug_log_.push_back(value); break;
    default: break;
  }
}

void Machine::schedule_key(u64 at_retired, u8 scancode) {
  auto it = std::upper_bound(key_schedule_.begin(), key_schedule_.end(), at_retired,
                             [](u64 at, const KeyEvent& k) { return at < k.at_retired; });
  key_schedule_.insert(it, KeyEvent{at_retired, scancode});
}

void Machine::push_key(u8 scancode) {
  kbd_fifo_.push_back(scancode);
  raise_irq(vec::kKeyboard);
}

void Machine::drain_key_schedule() {
  while (!key_schedule_.empty() && key_schedule_.front().at_retired <= cpu_.retired) {
    push_key(key_schedule_.front().scancode);
    key_schedule_.pop_front();
  }
}

// ---------------------------------------------------------------------------
// Execution

void Machine::set_arith_flags(u32 result) {
  cpu_.zf = result == 0;
  cpu_.nf = (result >> 31) != 0;
}

namespace {

bool privileged(Op op) {
  switch (op) {
    case Op::Hlt:
    case Op::In:
    case Op::Out:
    case Op::Iret:
    case Op::Movcr:
    case Op::Movrc:
    case Op::Sti:
    case Op::Cli:
      return true;
    default:
      return false;
  }
}

StepOutcome fault_outcome(u8 vector, u32 err, u32 addr, u8 trap = 0) {
  StepOutcome o;
  o.kind = StepOutcome::Kind::Fault;
  o.vector = vector;
  o.error_code = err;
  o.fault_address = addr;
  o.trap_length = trap;
  return o;
}

}  // namespace

StepOutcome Machine::step(StepHooks* hooks) {
  using Kind = StepOutcome::Kind;
  if (cpu_.halted) return {Kind::Halted};

  drain_key_schedule();

  if (cpu_.interrupts && pending_irqs_ != 0) {
    const int line = std::countr_zero(pending_irqs_);
    StepOutcome o;
    o.line = line;
    if (hooks && hooks->intercept_interrupt(line)) {
      o.kind = Kind::Intercepted;
      return o;
    }
    deliver_interrupt(line);
    o.kind = cpu_.halted ? Kind::Halted : Kind::Interrupted;
    return o;
  }

  std::array<u8, 8> buf{};
  std::size_t len = 0;
  Fault f{};
  if (!fetch(cpu_.pc, buf, len, f)) return fault_outcome(f.vector, f.error_code, f.address);

  isa::Instruction in;
  try {
    in = isa::decode(std::span<const u8>(buf.data(), len)).instr;
  } catch (const Error&) {
    return fault_outcome(vec::kGeneralProtection, 0, cpu_.pc);
  }
  if (cpu_.mode == Mode::User && privileged(in.op)) return fault_outcome(vec::kGeneralProtection, 0, cpu_.pc);

  if (hooks && hooks->intercept_instruction(in)) {
    StepOutcome o;
    o.kind = Kind::Intercepted;
    o.instr = in;
    return o;
  }

  auto& r = cpu_.r;
  u32 next = cpu_.pc + static_cast<u32>(len);
  switch (in.op) {
    case Op::Nop: break;
    case Op::Hlt:
      complete_halt();
      return {Kind::Halted};
    case Op::Movi: r[in.a] = in.imm; break;
    case Op::Mov: r[in.a] = r[in.b]; break;
    case Op::Ld: {
      u32 v;
      if (!load32(r[in.b] + in.imm, v, f, hooks)) return fault_outcome(f.vector, f.error_code, f.address);
      r[in.a] = v;
      break;
    }
    case Op::St: {
      std::array<u32, 4> pas{};
      if (!check_store32(r[in.a] + in.imm, pas, f)) return fault_outcome(f.vector, f.error_code, f.address);
      commit_store32(pas, r[in.b]);
      break;
    }
    case Op::Add: r[in.a] += r[in.b]; set_arith_flags(r[in.a]); break;
    case Op::Sub: r[in.a] -= r[in.b]; set_arith_flags(r[in.a]); break;
    case Op::And: r[in.a] &= r[in.b]; break;
    case Op::Or: r[in.a] |= r[in.b]; break;
    case Op::Xor: r[in.a] ^= r[in.b]; break;
    case Op::Addi: r[in.a] += in.imm; set_arith_flags(r[in.a]); break;
    case Op::Cmp: set_arith_flags(r[in.a] - r[in.b]); break;
    case Op::Jmp: next = in.imm; break;
    case Op::Jz: if (cpu_.zf) next = in.imm; break;
    case Op::Jnz: if (!cpu_.zf) next = in.imm; break;
    case Op::Call: {
      std::array<u32, 4> pas{};
      if (!check_store32(r[7] - 4, pas, f)) return fault_outcome(f.vector, f.error_code, f.address);
      commit_store32(pas, next);
      r[7] -= 4;
      next = in.imm;
      break;
    }
    case Op::Ret: {
      u32 v;
      if (!load32(r[7], v, f, hooks)) return fault_outcome(f.vector, f.error_code, f.address);
      r[7] += 4;
      next = v;
      break;
    }
    case Op::Push: {
      std::array<u32, 4> pas{};
      if (!check_store32(r[7] - 4, pas, f)) return fault_outcome(f.vector, f.error_code, f.address);
      commit_store32(pas, r[in.a]);
      r[7] -= 4;
      break;
    }
    case Op::Pop: {
      u32 v;
      if (!load32(r[7], v, f, hooks)) return fault_outcome(f.vector, f.error_code, f.address);
      r[7] += 4;
      r[in.a] = v;
      break;
    }
    case Op::In: r[in.a] = port_in(static_cast<u8>(in.imm)); break;
    case Op::Out: port_out(static_cast<u8>(in.imm), static_cast<u8>(r[in.a])); break;
    case Op::Syscall: return fault_outcome(vec::kSyscall, 0, cpu_.pc, 1);
    case Op::Brk: return fault_outcome(vec::kBreakpoint, 0, cpu_.pc, 1);
    case Op::Iret: {
      const u32 fl = cpu_.control(Cr::Eflags);
      next = cpu_.control(Cr::Epc);
      cpu_.zf = fl & eflags::kZero;
      cpu_.nf = fl & eflags::kNegative;
      cpu_.interrupts = fl & eflags::kInterrupt;
      cpu_.mode = cpu_.control(Cr::Emode) ? Mode::User : Mode::Kernel;
      break;
    }
    case Op::Movcr: cpu_.cr[in.a] = r[in.b]; break;
    case Op::Movrc: r[in.a] = cpu_.cr[in.b]; break;
    case Op::Sti: cpu_.interrupts = true; break;
    case Op::Cli: cpu_.interrupts = false; break;
  }
  cpu_.pc = next;
  retire();
  return {Kind::Retired};
}

u64 Machine::run(u64 max_steps) {
  for (u64 i = 0; i < max_steps && !cpu_.halted; ++i) {
    auto o = step();
    if (o.kind == StepOutcome::Kind::Fault) inject_exception(o.vector, o.error_code, o.fault_address, o.trap_length);
  }
  return cpu_.retired;
}

bool Machine::run_until_pc(u32 target, u64 max_steps) {
  for (u64 i = 0; i < max_steps && !cpu_.halted; ++i) {
    if (cpu_.pc == target) return true;
    auto o = step();
    if (o.kind == StepOutcome::Kind::Fault) inject_exception(o.vector, o.error_code, o.fault_address, o.trap_length);
  }
  return !cpu_.halted && cpu_.pc == target;
}

void Machine::run_until_retired(u64 target) {
  while (!cpu_.halted && cpu_.retired < target) {
    auto o = step();
    if (o.kind == StepOutcome::Kind::Fault) inject_exception(o.vector, o.error_code, o.fault_address, o.trap_length);
  }
}

std::vector<MemoryAccess> Machine::footprint() const {
  std::array<u8, 8> buf{};
  std::size_t len = 0;
  Fault f{};
  if (!fetch(cpu_.pc, buf, len, f)) return {};
  try {
    auto d = isa::decode(std::span<const u8>(buf.data(), len));
    return footprint(d.instr, cpu_.pc);
  } catch (const Error&) {
    return {{cpu_.pc, static_cast<u32>(len), Access::Execute}};
  }
}

std::vector<MemoryAccess> Machine::footprint(const isa::Instruction& in, u32 pc) const {
  std::vector<MemoryAccess> out{{pc, in.length(), Access::Execute}};
  const auto& r = cpu_.r;
  switch (in.op) {
    case Op::Ld: out.push_back({r[in.b] + in.imm, 4, Access::Read}); break;
    case Op::St: out.push_back({r[in.a] + in.imm, 4, Access::Write}); break;
    case Op::Push:
    case Op::Call: out.push_back({r[7] - 4, 4, Access::Write}); break;
    case Op::Pop:
    case Op::Ret: out.push_back({r[7], 4, Access::Read}); break;
    default: break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Digest

Digest Machine::digest(std::span<const PhysPatch> overlay) const {
  std::map<u32, std::vector<u8>> patched;  // page base -> patched copy
  for (const auto& p : overlay) {
    for (std::size_t i = 0; i < p.bytes.size(); ++i) {
      const u32 pa = p.physical + static_cast<u32>(i);
      if (pa >= ram_.size()) continue;
      const u32 page = pa & ~(kPageSize - 1);
      auto it = patched.find(page);
      if (it == patched.end())
        it = patched.emplace(page, std::vector<u8>(ram_.begin() + page, ram_.begin() + page + kPageSize)).first;
      it->second[pa - page] = p.bytes[i];
    }
  }

  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  auto feed = [&](const void* data, std::size_t n) { EVP_DigestUpdate(ctx, data, n); };
  auto feed32 = [&](u32 v) {
    const u8 b[4] = {u8(v), u8(v >> 8), u8(v >> 16), u8(v >> 24)};
    feed(b, 4);
  };
  auto feed64 = [&](u64 v) {
    feed32(static_cast<u32>(v));
    feed32(static_cast<u32>(v >> 32));
  };

  for (u32 v : cpu_.r) feed32(v);
  feed32(cpu_.pc);
  feed32(cpu_.flags_image());
  feed32(static_cast<u32>(cpu_.mode));
  for (u32 v : cpu_.cr) feed32(v);
  feed64(cpu_.retired);
  feed32(cpu_.halted ? 1 : 0);

  std::size_t cursor = 0;
  for (const auto& [page, bytes] : patched) {
    feed(ram_.data() + cursor, page - cursor);
    feed(bytes.data(), bytes.size());
    cursor = page + kPageSize;
  }
  feed(ram_.data() + cursor, ram_.size() - cursor);

  feed(framebuffer_.data(), framebuffer_.size());
  feed32(timer_divisor_);
  feed64(pending_irqs_);
  feed32(static_cast<u32>(kbd_fifo_.size()));
  for (u8 k : kbd_fifo_) feed(&k, 1);
  feed32(static_cast<u32>(debug_log_.size()));
  feed(debug_log_.data(), debug_log_.size());

  Digest out{};
  unsigned int n = 0;
  EVP_DigestFinal_ex(ctx, out.data(), &n);
  EVP_MD_CTX_free(ctx);
  return out;
}

}  // namespace hvsim
