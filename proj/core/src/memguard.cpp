#include "hvsim/memguard.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "hvsim/error.hpp"

namespace hvsim {

namespace {
constexpr u32 kEntries = kPageSize / 4;
u32 page_of(u32 pa) { return pa & pte::kFrameMask; }
}  // namespace

MemGuard::MemGuard(Machine& machine) : m_(machine) {}

std::vector<u32> MemGuard::default_reserved(std::size_t memory_bytes) {
  const u32 top = static_cast<u32>(memory_bytes / kPageSize);
  std::vector<u32> out;
  for (u32 f = top - kPoolFrames; f < top; ++f) out.push_back(f);
  return out;
}

void MemGuard::reserve(std::span<const u32> frames) {
  if (frames.empty()) return;
  const u32 total = static_cast<u32>(m_.memory_size() / kPageSize);
  for (u32 f : frames)
    if (f >= total) throw Error(Errc::PhysicalOutOfBounds, fmt::format("frame 0x{:X}", f));

  // Nothing the active address space can reach may be hidden. With paging
  // off every frame is reachable by identity, so the check is meaningless.
  const auto& cpu = m_.cpu();
  if (cpu.paging()) {
    const u32 dir = cpu.control(isa::Cr::Ptbr) & pte::kFrameMask;
    if (u64{dir} + kPageSize > m_.memory_size()) throw Error(Errc::MalformedDirectory, fmt::format("0x{:X}", dir));
    std::set<u32> wanted(frames.begin(), frames.end());
    for (u32 i = 0; i < kEntries; ++i) {
      const u32 de = m_.read_phys32(dir + i * 4);
      if (!(de & pte::kPresent)) continue;
      const u32 table = de & pte::kFrameMask;
      if (wanted.contains(pte::frame(de))) throw Error(Errc::FrameInUse, fmt::format("0x{:X}", pte::frame(de)));
      if (u64{table} + kPageSize > m_.memory_size()) throw Error(Errc::MalformedDirectory, fmt::format("0x{:X}", table));
      for (u32 j = 0; j < kEntries; ++j) {
        const u32 te = m_.read_phys32(table + j * 4);
        if ((te & pte::kPresent) && wanted.contains(pte::frame(te)))
          throw Error(Errc::FrameInUse, fmt::format("0x{:X}", pte::frame(te)));
      }
    }
  }

  reserved_.insert(frames.begin(), frames.end());
  const u32 lowest = *reserved_.begin();
  substitutes_free_.clear();
  for (u32 i = kPoolFrames; i >= 1; --i) {
    if (lowest < i) continue;
    const u32 f = lowest - i;
    if (!reserved_.contains(f)) substitutes_free_.push_back(f);
  }
  // Handed out lowest first.
  std::reverse(substitutes_free_.begin(), substitutes_free_.end());
  for (u32 f : reserved_) snapshot_[f] = m_.read_phys(f * kPageSize, kPageSize);
  for (u32 f : substitutes_free_) snapshot_[f] = m_.read_phys(f * kPageSize, kPageSize);

  if (cpu.paging() || cpu.control(isa::Cr::Ptbr) != 0) on_ptbr_load(cpu.control(isa::Cr::Ptbr));
}

// ---------------------------------------------------------------------------
// Records

MemGuard::Record* MemGuard::find(u32 slot) {
  auto it = records_.find(slot);
  return it == records_.end() ? nullptr : &it->second;
}

MemGuard::Record& MemGuard::ensure(u32 slot, bool leaf) {
  auto it = records_.find(slot);
  if (it != records_.end()) {
    sync(slot, it->second);
    return it->second;
  }
  Record rec;
  rec.guest = m_.read_phys32(slot);
  rec.installed = rec.guest;
  rec.leaf = leaf;
  ++record_pages_[page_of(slot)];
  return records_.emplace(slot, rec).first->second;
}

void MemGuard::sync(u32 slot, Record& rec) {
  // Slots in inactive tables are not watched; a guest edit shows up as a
  // value we did not install.
  const u32 raw = m_.read_phys32(slot);
  if (raw != rec.installed) {
    rec.guest = raw;
    rec.installed = raw;
  }
}

u32 MemGuard::substitute_for(u32 frame) {
  auto it = remap_.find(frame);
  if (it != remap_.end()) return it->second;
  if (substitutes_free_.empty()) throw Error(Errc::SubstitutePoolExhausted, fmt::format("frame 0x{:X}", frame));
  const u32 s = substitutes_free_.front();
  substitutes_free_.erase(substitutes_free_.begin());
  // The guest believes it is using the reserved frame; start it with the
  // contents the guest would have found there.
  m_.write_phys(s * kPageSize, snapshot_.at(frame));
  remap_.emplace(frame, s);
  return s;
}

u32 MemGuard::derive(const Record& rec) {
  u32 v = rec.guest;
  if (v & pte::kPresent) {
    const u32 frame = pte::frame(v);
    if (reserved_.contains(frame)) v = (v & ~pte::kFrameMask) | (substitute_for(frame) << 12);
    if (rec.leaf && !rec.lifted && watch_.contains(frame << 12)) v &= ~pte::kWritable;
  }
  if (rec.protect > 0 && !rec.lifted) v &= ~pte::kPresent;
  return v;
}

void MemGuard::install(u32 slot, Record& rec) {
  rec.installed = derive(rec);
  m_.write_phys32(slot, rec.installed);
}

void MemGuard::settle(u32 slot) {
  auto it = records_.find(slot);
  if (it == records_.end()) return;
  Record& rec = it->second;
  install(slot, rec);
  if (rec.protect == 0 && !rec.lifted && rec.installed == rec.guest) {
    if (--record_pages_[page_of(slot)] == 0) record_pages_.erase(page_of(slot));
    records_.erase(it);
  }
}

bool MemGuard::tracks_page(u32 page) const {
  page = page_of(page);
  return watch_.contains(page) || record_pages_.contains(page);
}

// ---------------------------------------------------------------------------
// Watch set

void MemGuard::on_ptbr_load(u32 ptbr) {
  const u32 dir = ptbr & pte::kFrameMask;
  if (u64{dir} + kPageSize > m_.memory_size()) throw Error(Errc::MalformedDirectory, fmt::format("0x{:X}", dir));
  directory_ = dir;
  have_directory_ = true;
  if (!active()) return;
  rebuild();
}

void MemGuard::rebuild() {
  if (!have_directory_) return;
  std::set<u32> watch{directory_};
  std::vector<u32> tables;
  for (u32 i = 0; i < kEntries; ++i) {
    const u32 slot = directory_ + i * 4;
    Record* rec = find(slot);
    if (rec) sync(slot, *rec);
    const u32 de = rec ? rec->guest : m_.read_phys32(slot);
    if (!(de & pte::kPresent)) continue;
    if (reserved_.contains(pte::frame(de))) {
      Record& r = ensure(slot, false);
      install(slot, r);
    }
    const u32 actual = find(slot) ? find(slot)->installed : de;
    const u32 table = actual & pte::kFrameMask;
    if (u64{table} + kPageSize > m_.memory_size()) throw Error(Errc::MalformedDirectory, fmt::format("table 0x{:X}", table));
    if (watch.insert(table).second) tables.push_back(table);
  }
  watch_ = std::move(watch);

  // Pull in every leaf slot that needs a derived value under the new set.
  for (u32 table : tables) {
    for (u32 j = 0; j < kEntries; ++j) {
      const u32 slot = table + j * 4;
      if (find(slot)) continue;
      const u32 te = m_.read_phys32(slot);
      if (!(te & pte::kPresent)) continue;
      const u32 frame = pte::frame(te);
      if (reserved_.contains(frame) || watch_.contains(frame << 12)) ensure(slot, true);
    }
  }
  recompute_all();
}

void MemGuard::recompute_all() {
  std::vector<u32> slots;
  slots.reserve(records_.size());
  for (auto& [slot, rec] : records_) {
    sync(slot, rec);
    slots.push_back(slot);
  }
  for (u32 slot : slots) settle(slot);
}

void MemGuard::reconcile_write(u32 pa, u32 len) {
  if (!active() && records_.empty()) return;
  bool directory_touched = false;
  const u32 first = pa & ~3u;
  const u32 end = pa + len;
  for (u32 slot = first; slot < end; slot += 4) {
    const u32 page = page_of(slot);
    Record* rec = find(slot);
    const bool in_watch = watch_.contains(page);
    if (!rec && !in_watch) continue;
    ++pt_write_reconciles_;
    if (have_directory_ && page == directory_) directory_touched = true;
    const u32 raw = m_.read_phys32(slot);
    if (rec) {
      u32 merged = rec->guest;
      for (u32 b = 0; b < 4; ++b) {
        const u32 byte_pa = slot + b;
        if (byte_pa < pa || byte_pa >= end) continue;
        const u32 mask = 0xFFu << (8 * b);
        merged = (merged & ~mask) | (raw & mask);
      }
      rec->guest = merged;
      rec->installed = raw;
    } else {
      // Only keep a record if the new value needs a derived form.
      const u32 frame = pte::frame(raw);
      const bool leaf = page != directory_;
      if (!(raw & pte::kPresent)) continue;
      if (!reserved_.contains(frame) && !(leaf && watch_.contains(frame << 12))) continue;
      ensure(slot, leaf);
    }
    settle(slot);
  }
  if (directory_touched) rebuild();
}

// ---------------------------------------------------------------------------
// Protection

void MemGuard::protect(u32 slot) {
  Record& rec = ensure(slot, true);
  ++rec.protect;
  settle(slot);
}

void MemGuard::unprotect(u32 slot) {
  Record* rec = find(slot);
  if (!rec || rec->protect == 0) return;
  sync(slot, *rec);
  --rec->protect;
  settle(slot);
}

bool MemGuard::protected_slot(u32 slot) const {
  auto it = records_.find(slot);
  return it != records_.end() && it->second.protect > 0;
}

void MemGuard::lift(u32 slot) {
  Record* rec = find(slot);
  if (!rec) return;
  sync(slot, *rec);
  rec->lifted = true;
  install(slot, *rec);
}

void MemGuard::relower(u32 slot) {
  Record* rec = find(slot);
  if (!rec) return;
  sync(slot, *rec);
  rec->lifted = false;
  settle(slot);
}

// ---------------------------------------------------------------------------
// Guest-physical view

u32 MemGuard::guest_read32(u32 pa) {
  if (Record* rec = find(pa)) {
    sync(pa, *rec);
    return rec->guest;
  }
  const auto bytes = guest_phys_read(pa, 4);
  return u32(bytes[0]) | u32(bytes[1]) << 8 | u32(bytes[2]) << 16 | u32(bytes[3]) << 24;
}

void MemGuard::patch_read(u32 pa, std::span<u8> bytes) {
  if (records_.empty() || !record_pages_.contains(page_of(pa))) return;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const u32 a = pa + static_cast<u32>(i);
    const u32 slot = a & ~3u;
    Record* rec = find(slot);
    if (!rec) continue;
    sync(slot, *rec);
    bytes[i] = static_cast<u8>(rec->guest >> (8 * (a - slot)));
  }
}

std::vector<u8> MemGuard::guest_phys_read(u32 pa, std::size_t n) {
  std::vector<u8> out = m_.read_phys(pa, n);
  if (!active() && records_.empty()) return out;
  std::set<u32> substitutes_in_use;
  for (const auto& [r, s] : remap_) substitutes_in_use.insert(s);
  for (std::size_t i = 0; i < n; ++i) {
    const u32 a = pa + static_cast<u32>(i);
    const u32 frame = a >> 12;
    const u32 off = a & (kPageSize - 1);
    if (reserved_.contains(frame)) {
      auto it = remap_.find(frame);
      out[i] = it != remap_.end() ? m_.read_phys(it->second * kPageSize + off, 1)[0] : snapshot_.at(frame)[off];
      continue;
    }
    if (substitutes_in_use.contains(frame)) {
      out[i] = snapshot_.at(frame)[off];
      continue;
    }
  }
  patch_read(pa, out);
  return out;
}

void MemGuard::guest_phys_write(u32 pa, std::span<const u8> data) {
  if (u64{pa} + data.size() > m_.memory_size())
    throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{}", pa, data.size()));
  std::set<u32> substitutes_in_use;
  for (const auto& [r, s] : remap_) substitutes_in_use.insert(s);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const u32 a = pa + static_cast<u32>(i);
    const u32 frame = a >> 12;
    const u32 off = a & (kPageSize - 1);
    if (reserved_.contains(frame)) {
      auto it = remap_.find(frame);
      if (it != remap_.end()) m_.write_phys(it->second * kPageSize + off, data.subspan(i, 1));
      else snapshot_.at(frame)[off] = data[i];
      continue;
    }
    if (substitutes_in_use.contains(frame)) {
      snapshot_.at(frame)[off] = data[i];
      continue;
    }
    // Tracked slots: fold the byte into the guest value rather than
    // clobbering the derived one.
    const u32 slot = a & ~3u;
    if (Record* rec = find(slot)) {
      sync(slot, *rec);
      const u32 shift = 8 * (a - slot);
      rec->guest = (rec->guest & ~(0xFFu << shift)) | (u32(data[i]) << shift);
      settle(slot);
      if (have_directory_ && page_of(slot) == directory_) rebuild();
      continue;
    }
    m_.write_phys(a, data.subspan(i, 1));
    if (tracks_page(a)) reconcile_write(a, 1);
  }
}

std::vector<PhysPatch> MemGuard::guest_view_overlay() {
  std::vector<PhysPatch> out;
  std::set<u32> substitutes_in_use;
  for (const auto& [r, s] : remap_) substitutes_in_use.insert(s);
  for (u32 f : reserved_) {
    auto it = remap_.find(f);
    out.push_back({f * kPageSize, it != remap_.end() ? m_.read_phys(it->second * kPageSize, kPageSize) : snapshot_.at(f)});
  }
  for (u32 s : substitutes_in_use) out.push_back({s * kPageSize, snapshot_.at(s)});
  for (auto& [slot, rec] : records_) {
    sync(slot, rec);
    out.push_back({slot, {u8(rec.guest), u8(rec.guest >> 8), u8(rec.guest >> 16), u8(rec.guest >> 24)}});
  }
  return out;
}

bool MemGuard::in_pool(u32 pa, std::size_t n) const {
  for (std::size_t i = 0; i < n; ++i)
    if (!reserved_.contains((pa + static_cast<u32>(i)) >> 12)) return false;
  return true;
}

std::vector<u8> MemGuard::pool_read(u32 pa, std::size_t n) const {
  if (!in_pool(pa, n)) throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{} outside the hidden pool", pa, n));
  return m_.read_phys(pa, n);
}

void MemGuard::pool_write(u32 pa, std::span<const u8> data) {
  if (!in_pool(pa, data.size()))
    throw Error(Errc::PhysicalOutOfBounds, fmt::format("0x{:X}+{} outside the hidden pool", pa, data.size()));
  m_.write_phys(pa, data);
}

void MemGuard::restore_all() {
  for (auto& [slot, rec] : records_) {
    sync(slot, rec);
    m_.write_phys32(slot, rec.guest);
  }
  records_.clear();
  record_pages_.clear();
  // The guest's data for a remapped frame lives in its substitute; hand it
  // back to the frame the guest named.
  for (const auto& [r, s] : remap_) {
    m_.write_phys(r * kPageSize, m_.read_phys(s * kPageSize, kPageSize));
    m_.write_phys(s * kPageSize, snapshot_.at(s));
  }
  for (u32 f : reserved_)
    if (!remap_.contains(f)) m_.write_phys(f * kPageSize, snapshot_.at(f));
  remap_.clear();
  reserved_.clear();
  substitutes_free_.clear();
  snapshot_.clear();
  watch_.clear();
  have_directory_ = false;
}

}  // namespace hvsim
