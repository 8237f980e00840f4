#pragma once

// GISA-32: the byte-addressable, little-endian, variable-length instruction
// set executed by the emulated machine. Opcode byte alone fixes the length.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hvsim::isa {

enum class Op : std::uint8_t {
  Nop = 0x00,
  Hlt = 0x01,
  Movi = 0x02,
  Mov = 0x03,
  Ld = 0x04,
  St = 0x05,
  Add = 0x06,
  Sub = 0x07,
  And = 0x08,
  Or = 0x09,
  Xor = 0x0A,
  Addi = 0x0B,
  Cmp = 0x0C,
  Jmp = 0x0D,
  Jz = 0x0E,
  Jnz = 0x0F,
  Call = 0x10,
  Ret = 0x11,
  Push = 0x12,
  Pop = 0x13,
  In = 0x14,
  Out = 0x15,
  Syscall = 0x16,
  Iret = 0x17,
  Movcr = 0x18,
  Movrc = 0x19,
  Sti = 0x1A,
  Cli = 0x1B,
  Brk = 0xCC,
};

/// Operand layout following the opcode byte.
enum class Form : std::uint8_t {
  None,         // op
  RegImm32,     // op rd imm32
  RegReg,       // op (a<<4)|b
  RegRegOff16,  // op (a<<4)|b off16
  RegImm16,     // op rd imm16
  Addr32,       // op a32
  Reg,          // op r
  RegPort,      // op r port
  CrReg,        // op (cr<<4)|rs
  RegCr,        // op (rd<<4)|cr
};

struct OpInfo {
  Op op;
  std::string_view mnemonic;
  Form form;
  std::uint8_t length;
};

inline constexpr std::uint8_t kBrkByte = 0xCC;
inline constexpr std::uint8_t kCallLength = 5;
inline constexpr int kRegisterCount = 8;
inline constexpr int kControlRegisterCount = 8;

/// Control register indices as used by MOVCR/MOVRC.
enum class Cr : std::uint8_t { Ptbr = 0, Ivt = 1, Far = 2, Err = 3, Epc = 4, Eflags = 5, Emode = 6, Pgen = 7 };

std::string_view cr_name(std::uint8_t index);

/// Table lookup by opcode byte; nullptr for unassigned bytes.
const OpInfo* lookup(std::uint8_t opcode) noexcept;
const OpInfo& info(Op op) noexcept;

/// One decoded instruction. Field meaning depends on the form:
///   RegImm32: a=rd imm        RegReg: a,b          RegRegOff16: a,b imm=off (sign-extended)
///   RegImm16: a=rd imm (sign-extended)  Addr32: imm  Reg: a
///   RegPort: a=reg imm=port   CrReg: a=cr b=rs     RegCr: a=rd b=cr
struct Instruction {
  Op op = Op::Nop;
  std::uint8_t a = 0;
  std::uint8_t b = 0;
  std::uint32_t imm = 0;

  std::int32_t simm() const noexcept { return static_cast<std::int32_t>(imm); }
  std::uint8_t length() const noexcept { return info(op).length; }
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

std::vector<std::uint8_t> encode(const Instruction& instr);

struct Decoded {
  Instruction instr;
  std::size_t length;
};

Decoded decode(std::span<const std::uint8_t> bytes, std::size_t offset = 0);

/// Render one instruction the way the assembler accepts it back.
std::string format(const Instruction& instr);

struct ListingLine {
  std::uint32_t address;
  std::string text;
};

/// Total: unknown or truncated bytes become `DB 0xNN` and advance one byte.
std::vector<ListingLine> disassemble(std::span<const std::uint8_t> bytes, std::uint32_t base,
                                     std::size_t max_count);

// ---------------------------------------------------------------------------
// Assembler

struct Section {
  std::uint32_t load_address;     // physical
  std::uint32_t virtual_address;  // address labels resolve against
  std::vector<std::uint8_t> bytes;
};

struct Symbol {
  std::string name;
  std::uint32_t address;  // virtual
  bool absolute = false;  // true when the address lies outside every section's bytes
};

struct AssembledImage {
  std::vector<Section> sections;
  std::uint32_t entry = 0x100;
  std::vector<Symbol> symbols;

  std::optional<std::uint32_t> symbol(std::string_view name) const;
};

/// Two-pass assembler. Directives: `.org VA[, PA]`, `.word v[, v...]`,
/// `.ascii "text"`, `.global name[, name...]`. `;` starts a comment.
AssembledImage assemble(std::string_view source);

/// `HEXADDR NAME` lines, one per exported symbol, sorted by address.
std::string symbols_file(const AssembledImage& image);

/// Image file: repeated (u32 loadAddr, u32 len, bytes), little-endian.
std::vector<std::uint8_t> serialize_image(const AssembledImage& image);
AssembledImage parse_image(std::span<const std::uint8_t> data);

}  // namespace hvsim::isa
