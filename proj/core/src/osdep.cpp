#include "hvsim/osdep.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "hvsim/error.hpp"

namespace hvsim {

SymbolTable SymbolTable::parse(std::string_view text) {
  SymbolTable t;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream ls(line);
    std::string addr, name;
    if (!(ls >> addr) || addr[0] == '#') continue;
    if (!(ls >> name)) throw Error(Errc::SyntaxError, fmt::format("symbols line {}: missing name", number));
    u32 v = 0;
    auto [p, ec] = std::from_chars(addr.data(), addr.data() + addr.size(), v, 16);
    if (ec != std::errc{} || p != addr.data() + addr.size())
      throw Error(Errc::SyntaxError, fmt::format("symbols line {}: bad address '{}'", number, addr));
    t.entries_.push_back({v, name});
  }
  std::stable_sort(t.entries_.begin(), t.entries_.end(), [](const Entry& a, const Entry& b) { return a.address < b.address; });
  return t;
}

SymbolTable SymbolTable::from_image(const isa::AssembledImage& image) { return parse(isa::symbols_file(image)); }

std::optional<u32> SymbolTable::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.address;
  return std::nullopt;
}

u32 SymbolTable::address(std::string_view name) const {
  if (auto a = find(name)) return *a;
  throw Error(Errc::SymbolNotFound, std::string(name));
}

std::optional<SymbolTable::Resolved> SymbolTable::try_resolve(u32 va) const {
  auto it = std::upper_bound(entries_.begin(), entries_.end(), va, [](u32 v, const Entry& e) { return v < e.address; });
  if (it == entries_.begin()) return std::nullopt;
  --it;
  return Resolved{it->name, va - it->address};
}

SymbolTable::Resolved SymbolTable::resolve(u32 va) const {
  if (auto r = try_resolve(va)) return *r;
  throw Error(Errc::SymbolNotFound, fmt::format("0x{:X}", va));
}

std::string SymbolTable::describe(u32 va) const {
  auto r = try_resolve(va);
  if (!r) return fmt::format("0x{:X}", va);
  return r->offset == 0 ? r->name : fmt::format("{}+0x{:X}", r->name, r->offset);
}

std::string_view to_string(ProcessState s) {
  switch (s) {
    case ProcessState::Ready: return "ready";
    case ProcessState::Running: return "running";
    case ProcessState::Done: return "done";
  }
  return "?";
}

GuestOs::GuestOs(PhysReader reader, const SymbolTable* symbols) : read_(std::move(reader)), symbols_(symbols) {}

u32 GuestOs::read32(u32 pa) const {
  auto b = read_(pa, 4);
  return u32(b[0]) | u32(b[1]) << 8 | u32(b[2]) << 16 | u32(b[3]) << 24;
}

bool GuestOs::supported() const {
  try {
    return read32(kinfo::kAddress + kinfo::kMagicOffset) == kinfo::kMagic;
  } catch (const Error&) {
    return false;
  }
}

void GuestOs::require_supported() const {
  if (!supported()) throw Error(Errc::UnsupportedGuest, "kernel info block magic missing");
}

ProcessInfo GuestOs::read_descriptor(u32 pa) const {
  const auto raw = read_(pa, kinfo::kDescriptorSize);
  auto field = [&](u32 off) { return u32(raw[off]) | u32(raw[off + 1]) << 8 | u32(raw[off + 2]) << 16 | u32(raw[off + 3]) << 24; };
  ProcessInfo p;
  p.descriptor = pa;
  p.pid = field(kinfo::kPid);
  for (u32 i = 0; i < kinfo::kNameLength && raw[kinfo::kName + i] != 0; ++i) p.name.push_back(static_cast<char>(raw[kinfo::kName + i]));
  p.ptbr = field(kinfo::kPtbr);
  p.state = static_cast<ProcessState>(field(kinfo::kState));
  p.stack_base = field(kinfo::kStackBase);
  p.heap_base = field(kinfo::kHeapBase);
  return p;
}

std::vector<ProcessInfo> GuestOs::processes() const {
  require_supported();
  std::vector<ProcessInfo> out;
  std::set<u32> seen;
  u32 cur = read32(kinfo::kAddress + kinfo::kListHeadOffset);
  while (cur != 0) {
    if (!seen.insert(cur).second) throw Error(Errc::CorruptList, fmt::format("cycle at 0x{:X}", cur));
    ProcessInfo p;
    try {
      p = read_descriptor(cur);
    } catch (const Error&) {
      throw Error(Errc::CorruptList, fmt::format("descriptor 0x{:X} out of bounds", cur));
    }
    out.push_back(p);
    cur = read32(cur + kinfo::kNext);
  }
  return out;
}

ProcessInfo GuestOs::process(u32 ptbr) const {
  for (auto& p : processes())
    if ((p.ptbr & pte::kFrameMask) == (ptbr & pte::kFrameMask)) return p;
  throw Error(Errc::NoSuchProcess, fmt::format("ptbr 0x{:X}", ptbr));
}

std::optional<ProcessInfo> GuestOs::current() const {
  require_supported();
  const u32 d = read32(kinfo::kAddress + kinfo::kCurrentOffset);
  if (d == 0) return std::nullopt;
  return read_descriptor(d);
}

u32 GuestOs::function_address(std::string_view name) const {
  if (!symbols_) throw Error(Errc::SymbolNotFound, std::string(name));
  return symbols_->address(name);
}

SymbolTable::Resolved GuestOs::function_name(u32 va) const {
  if (!symbols_) throw Error(Errc::SymbolNotFound, fmt::format("0x{:X}", va));
  return symbols_->resolve(va);
}

}  // namespace hvsim
