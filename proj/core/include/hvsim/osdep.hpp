#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hvsim/isa.hpp"
#include "hvsim/machine.hpp"

namespace hvsim {

/// Sorted (address, name) pairs from a symbols file.
class SymbolTable {
 public:
  struct Entry {
    u32 address;
    std::string name;
  };
  struct Resolved {
    std::string name;
    u32 offset;
  };

  SymbolTable() = default;
  /// Parse `HEXADDR NAME` lines. Blank lines and `#` comments are skipped.
  static SymbolTable parse(std::string_view text);
  static SymbolTable from_image(const isa::AssembledImage& image);

  u32 address(std::string_view name) const;  // SymbolNotFound
  std::optional<u32> find(std::string_view name) const;
  /// Nearest symbol at or below va.
  Resolved resolve(u32 va) const;  // SymbolNotFound if below every symbol
  std::optional<Resolved> try_resolve(u32 va) const;
  std::string describe(u32 va) const;  // "name+0x4" or hex address

  const std::vector<Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<Entry> entries_;
};

/// Layout contract between the toy kernel and the introspection layer.
namespace kinfo {
inline constexpr u32 kAddress = 0x0F00;
inline constexpr u32 kMagic = 0x4B534F47;  // "GOSK"
inline constexpr u32 kMagicOffset = 0;
inline constexpr u32 kListHeadOffset = 4;
inline constexpr u32 kCurrentOffset = 8;

// Process descriptor fields.
inline constexpr u32 kPid = 0;
inline constexpr u32 kName = 4;
inline constexpr u32 kNameLength = 16;
inline constexpr u32 kPtbr = 20;
inline constexpr u32 kState = 24;
inline constexpr u32 kStackBase = 28;
inline constexpr u32 kHeapBase = 32;
inline constexpr u32 kNext = 36;
inline constexpr u32 kDescriptorSize = 40;
}  // namespace kinfo

enum class ProcessState : u32 { Ready = 0, Running = 1, Done = 2 };
std::string_view to_string(ProcessState s);

struct ProcessInfo {
  u32 pid = 0;
  std::string name;
  u32 ptbr = 0;
  ProcessState state = ProcessState::Ready;
  u32 stack_base = 0;
  u32 heap_base = 0;
  u32 descriptor = 0;  // physical address
};

/// OS-dependent queries over the toy kernel's structures. Reads go through
/// the supplied physical reader so a tool's accesses stay mediated.
class GuestOs {
 public:
  using PhysReader = std::function<std::vector<u8>(u32 pa, std::size_t n)>;

  GuestOs(PhysReader reader, const SymbolTable* symbols);

  bool supported() const;
  std::vector<ProcessInfo> processes() const;  // UnsupportedGuest, CorruptList
  ProcessInfo process(u32 ptbr) const;         // NoSuchProcess
  std::optional<ProcessInfo> current() const;
  std::string name(u32 ptbr) const { return process(ptbr).name; }
  u32 pid(u32 ptbr) const { return process(ptbr).pid; }
  u32 stack_base(u32 ptbr) const { return process(ptbr).stack_base; }
  u32 heap_base(u32 ptbr) const { return process(ptbr).heap_base; }

  u32 function_address(std::string_view name) const;
  SymbolTable::Resolved function_name(u32 va) const;

 private:
  u32 read32(u32 pa) const;
  void require_supported() const;
  ProcessInfo read_descriptor(u32 pa) const;

  PhysReader read_;
  const SymbolTable* symbols_;
};

}  // namespace hvsim
