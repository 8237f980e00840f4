#include "hvsim/isa.hpp"

#include <array>

#include <fmt/format.h>

#include "hvsim/error.hpp"

namespace hvsim {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::OperandOutOfRange: return "OperandOutOfRange";
    case Errc::UnknownOpcode: return "UnknownOpcode";
    case Errc::TruncatedInstruction: return "TruncatedInstruction";
    case Errc::InvalidOperand: return "InvalidOperand";
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::UndefinedLabel: return "UndefinedLabel";
    case Errc::DuplicateLabel: return "DuplicateLabel";
    case Errc::PhysicalOutOfBounds: return "PhysicalOutOfBounds";
    case Errc::AlreadyLaunched: return "AlreadyLaunched";
    case Errc::NotExited: return "NotExited";
    case Errc::NotRunning: return "NotRunning";
    case Errc::InvalidVmcs: return "InvalidVmcs";
    case Errc::PendingWorkRemains: return "PendingWorkRemains";
    case Errc::FrameInUse: return "FrameInUse";
    case Errc::MalformedDirectory: return "MalformedDirectory";
    case Errc::SubstitutePoolExhausted: return "SubstitutePoolExhausted";
    case Errc::AlreadyLoaded: return "AlreadyLoaded";
    case Errc::NotLoaded: return "NotLoaded";
    case Errc::ToolAlreadyRegistered: return "ToolAlreadyRegistered";
    case Errc::NoToolRegistered: return "NoToolRegistered";
    case Errc::UnsupportedCondition: return "UnsupportedCondition";
    case Errc::UnmappedAddress: return "UnmappedAddress";
    case Errc::DuplicateBreakpoint: return "DuplicateBreakpoint";
    case Errc::NoSuchBreakpoint: return "NoSuchBreakpoint";
    case Errc::SymbolNotFound: return "SymbolNotFound";
    case Errc::GateUnreachable: return "GateUnreachable";
    case Errc::UnmappedGuestAddress: return "UnmappedGuestAddress";
    case Errc::WriteAccessDenied: return "WriteAccessDenied";
    case Errc::NotMapped: return "NotMapped";
    case Errc::PortAccessDenied: return "PortAccessDenied";
    case Errc::ToolTerminated: return "ToolTerminated";
    case Errc::UnsupportedGuest: return "UnsupportedGuest";
    case Errc::CorruptList: return "CorruptList";
    case Errc::NoSuchProcess: return "NoSuchProcess";
    case Errc::UnknownFixture: return "UnknownFixture";
    case Errc::ImageFormat: return "ImageFormat";
    case Errc::ScriptParseError: return "ScriptParseError";
    case Errc::BindFailure: return "BindFailure";
  }
  return "Unknown";
}

}  // namespace hvsim

namespace hvsim::isa {

namespace {

constexpr std::array kOps = {
    OpInfo{Op::Nop, "NOP", Form::None, 1},
    OpInfo{Op::Hlt, "HLT", Form::None, 1},
    OpInfo{Op::Movi, "MOVI", Form::RegImm32, 6},
    OpInfo{Op::Mov, "MOV", Form::RegReg, 2},
    OpInfo{Op::Ld, "LD", Form::RegRegOff16, 4},
    OpInfo{Op::St, "ST", Form::RegRegOff16, 4},
    OpInfo{Op::Add, "ADD", Form::RegReg, 2},
    OpInfo{Op::Sub, "SUB", Form::RegReg, 2},
    OpInfo{Op::And, "AND", Form::RegReg, 2},
    OpInfo{Op::Or, "OR", Form::RegReg, 2},
    OpInfo{Op::Xor, "XOR", Form::RegReg, 2},
    OpInfo{Op::Addi, "ADDI", Form::RegImm16, 4},
    OpInfo{Op::Cmp, "CMP", Form::RegReg, 2},
    OpInfo{Op::Jmp, "JMP", Form::Addr32, 5},
    OpInfo{Op::Jz, "JZ", Form::Addr32, 5},
    OpInfo{Op::Jnz, "JNZ", Form::Addr32, 5},
    OpInfo{Op::Call, "CALL", Form::Addr32, 5},
    OpInfo{Op::Ret, "RET", Form::None, 1},
    OpInfo{Op::Push, "PUSH", Form::Reg, 2},
    OpInfo{Op::Pop, "POP", Form::Reg, 2},
    OpInfo{Op::In, "IN", Form::RegPort, 3},
    OpInfo{Op::Out, "OUT", Form::RegPort, 3},
    OpInfo{Op::Syscall, "SYSCALL", Form::None, 1},
    OpInfo{Op::Iret, "IRET", Form::None, 1},
    OpInfo{Op::Movcr, "MOVCR", Form::CrReg, 2},
    OpInfo{Op::Movrc, "MOVRC", Form::RegCr, 2},
    OpInfo{Op::Sti, "STI", Form::None, 1},
    OpInfo{Op::Cli, "CLI", Form::None, 1},
    OpInfo{Op::Brk, "BRK", Form::None, 1},
};

constexpr std::array<std::string_view, kControlRegisterCount> kCrNames = {
    "PTBR", "IVT", "FAR", "ERR", "EPC", "EFLAGS", "EMODE", "PGEN"};

std::uint32_t read_le32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

void put_le(std::vector<std::uint8_t>& out, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void check_reg(std::uint8_t r, const char* what) {
  if (r >= kRegisterCount) throw Error(Errc::OperandOutOfRange, fmt::format("{} index {}", what, r));
}

std::string hex(std::uint32_t v) { return fmt::format("0x{:X}", v); }

std::string signed_hex(std::int32_t v) {
  if (v < 0) return fmt::format("-0x{:X}", -static_cast<std::int64_t>(v));
  return hex(static_cast<std::uint32_t>(v));
}

}  // namespace

std::string_view cr_name(std::uint8_t index) {
  return index < kCrNames.size() ? kCrNames[index] : std::string_view{"CR?"};
}

const OpInfo* lookup(std::uint8_t opcode) noexcept {
  if (opcode == kBrkByte) return &kOps.back();
  if (opcode < kOps.size() - 1) return &kOps[opcode];
  return nullptr;
}

const OpInfo& info(Op op) noexcept { return *lookup(static_cast<std::uint8_t>(op)); }

std::vector<std::uint8_t> encode(const Instruction& in) {
  const OpInfo& oi = info(in.op);
  std::vector<std::uint8_t> out;
  out.reserve(oi.length);
  out.push_back(static_cast<std::uint8_t>(in.op));
  switch (oi.form) {
    case Form::None:
      break;
    case Form::RegImm32:
      check_reg(in.a, "register");
      out.push_back(in.a);
      put_le(out, in.imm, 4);
      break;
    case Form::RegReg:
    case Form::CrReg:
    case Form::RegCr:
      check_reg(in.a, "operand");
      check_reg(in.b, "operand");
      out.push_back(static_cast<std::uint8_t>(in.a << 4 | in.b));
      break;
    case Form::RegRegOff16:
    case Form::RegImm16: {
      if (in.simm() < -32768 || in.simm() > 32767)
        throw Error(Errc::OperandOutOfRange, fmt::format("imm16 {}", in.simm()));
      check_reg(in.a, "register");
      if (oi.form == Form::RegRegOff16) {
        check_reg(in.b, "register");
        out.push_back(static_cast<std::uint8_t>(in.a << 4 | in.b));
      } else {
        out.push_back(in.a);
      }
      put_le(out, in.imm, 2);
      break;
    }
    case Form::Addr32:
      put_le(out, in.imm, 4);
      break;
    case Form::Reg:
      check_reg(in.a, "register");
      out.push_back(in.a);
      break;
    case Form::RegPort:
      check_reg(in.a, "register");
      if (in.imm > 0xFF) throw Error(Errc::OperandOutOfRange, fmt::format("port {}", in.imm));
      out.push_back(in.a);
      out.push_back(static_cast<std::uint8_t>(in.imm));
      break;
  }
  return out;
}

Decoded decode(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset >= bytes.size()) throw Error(Errc::TruncatedInstruction, "offset past end");
  const OpInfo* oi = lookup(bytes[offset]);
  if (oi == nullptr) throw Error(Errc::UnknownOpcode, hex(bytes[offset]));
  if (bytes.size() - offset < oi->length) throw Error(Errc::TruncatedInstruction, std::string(oi->mnemonic));

  auto b = bytes.subspan(offset, oi->length);
  Instruction in{oi->op};
  auto reg = [](std::uint8_t v) {
    if (v >= kRegisterCount) throw Error(Errc::InvalidOperand, fmt::format("register byte {}", v));
    return v;
  };
  switch (oi->form) {
    case Form::None:
      break;
    case Form::RegImm32:
      in.a = reg(b[1]);
      in.imm = read_le32(b, 2);
      break;
    case Form::RegReg:
    case Form::CrReg:
    case Form::RegCr:
      in.a = reg(b[1] >> 4);
      in.b = reg(b[1] & 0x0F);
      break;
    case Form::RegRegOff16:
      in.a = reg(b[1] >> 4);
      in.b = reg(b[1] & 0x0F);
      in.imm = static_cast<std::uint32_t>(static_cast<std::int16_t>(b[2] | b[3] << 8));
      break;
    case Form::RegImm16:
      in.a = reg(b[1]);
      in.imm = static_cast<std::uint32_t>(static_cast<std::int16_t>(b[2] | b[3] << 8));
      break;
    case Form::Addr32:
      in.imm = read_le32(b, 1);
      break;
    case Form::Reg:
      in.a = reg(b[1]);
      break;
    case Form::RegPort:
      in.a = reg(b[1]);
      in.imm = b[2];
      break;
  }
  return {in, oi->length};
}

std::string format(const Instruction& in) {
  const OpInfo& oi = info(in.op);
  const auto m = oi.mnemonic;
  auto mem = [&](std::uint8_t base) {
    if (in.simm() == 0) return fmt::format("[r{}]", base);
    return in.simm() < 0 ? fmt::format("[r{}{}]", base, signed_hex(in.simm()))
                         : fmt::format("[r{}+{}]", base, signed_hex(in.simm()));
  };
  switch (oi.form) {
    case Form::None: return std::string(m);
    case Form::RegImm32: return fmt::format("{} r{}, {}", m, in.a, hex(in.imm));
    case Form::RegReg: return fmt::format("{} r{}, r{}", m, in.a, in.b);
    case Form::RegRegOff16:
      if (in.op == Op::Ld) return fmt::format("{} r{}, {}", m, in.a, mem(in.b));
      return fmt::format("{} {}, r{}", m, mem(in.a), in.b);
    case Form::RegImm16: return fmt::format("{} r{}, {}", m, in.a, signed_hex(in.simm()));
    case Form::Addr32: return fmt::format("{} {}", m, hex(in.imm));
    case Form::Reg: return fmt::format("{} r{}", m, in.a);
    case Form::RegPort:
      if (in.op == Op::In) return fmt::format("{} r{}, {}", m, in.a, hex(in.imm));
      return fmt::format("{} {}, r{}", m, hex(in.imm), in.a);
    case Form::CrReg: return fmt::format("{} {}, r{}", m, cr_name(in.a), in.b);
    case Form::RegCr: return fmt::format("{} r{}, {}", m, in.a, cr_name(in.b));
  }
  return std::string(m);
}

std::vector<ListingLine> disassemble(std::span<const std::uint8_t> bytes, std::uint32_t base,
                                     std::size_t max_count) {
  std::vector<ListingLine> out;
  std::size_t off = 0;
  while (off < bytes.size() && out.size() < max_count) {
    const auto addr = static_cast<std::uint32_t>(base + off);
    try {
      auto d = decode(bytes, off);
      out.push_back({addr, format(d.instr)});
      off += d.length;
    } catch (const Error&) {
      out.push_back({addr, fmt::format("DB 0x{:02X}", bytes[off])});
      off += 1;
    }
  }
  return out;
}

}  // namespace hvsim::isa
