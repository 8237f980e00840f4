#pragma once

#include <map>
#include <set>
#include <span>
#include <unordered_map>
#include <vector>

#include "hvsim/machine.hpp"

namespace hvsim {

/// Software memory virtualization over the guest's own page tables.
///
/// Every page-table slot the framework has an opinion about gets a record
/// holding the value the guest believes is stored there. The value actually
/// in memory is derived from it: reserved frames are swapped for substitutes,
/// aliases of page-table pages lose their writable bit (so edits trap), and
/// slots protected for breakpoints/watchpoints lose their present bit.
class MemGuard {
 public:
  static constexpr u32 kPoolFrames = 16;

  explicit MemGuard(Machine& machine);

  /// Top kPoolFrames frames of RAM.
  static std::vector<u32> default_reserved(std::size_t memory_bytes);

  /// Install the hidden pool. Substitutes are drawn from the kPoolFrames
  /// frames directly below the lowest reserved frame.
  void reserve(std::span<const u32> frames);
  bool active() const { return !reserved_.empty(); }
  bool is_reserved(u32 frame) const { return reserved_.contains(frame); }
  const std::set<u32>& reserved() const { return reserved_; }
  /// Reserved frame -> substitute frame for every remap in force.
  const std::map<u32, u32>& remaps() const { return remap_; }

  /// Rebuild the watch set for a newly loaded directory and reconcile its tables.
  void on_ptbr_load(u32 ptbr);
  const std::set<u32>& watch_set() const { return watch_; }
  bool watched(u32 page) const { return watch_.contains(page & pte::kFrameMask); }
  u32 directory() const { return directory_; }

  /// Raw bytes [pa, pa+len) were just stored by the guest (or a tool);
  /// fold them into the guest-visible slot values.
  void reconcile_write(u32 pa, u32 len);
  /// True if the page holds a page-table slot this layer tracks or watches.
  bool tracks_page(u32 page) const;

  // Present-bit protection of leaf slots (reference counted).
  void protect(u32 slot);
  void unprotect(u32 slot);
  bool protected_slot(u32 slot) const;
  /// Temporarily install the slot without protection or write-trapping.
  void lift(u32 slot);
  void relower(u32 slot);

  /// Guest-visible 32-bit value at an aligned slot address.
  u32 guest_read32(u32 pa);
  /// Masquerade hook for guest data loads.
  void patch_read(u32 pa, std::span<u8> bytes);
  /// Guest-physical view: slot values as written, reserved frames as the
  /// guest would see them.
  std::vector<u8> guest_phys_read(u32 pa, std::size_t n);
  void guest_phys_write(u32 pa, std::span<const u8> data);

  /// Overlay that turns the raw machine memory into the guest-physical view.
  std::vector<PhysPatch> guest_view_overlay();

  /// Framework-private access to reserved frames.
  std::vector<u8> pool_read(u32 pa, std::size_t n) const;
  void pool_write(u32 pa, std::span<const u8> data);
  bool in_pool(u32 pa, std::size_t n) const;

  /// Put every slot and frame back the way the guest left it.
  void restore_all();

  u64 pt_write_reconciles() const { return pt_write_reconciles_; }
  std::size_t record_count() const { return records_.size(); }

 private:
  struct Record {
    u32 guest = 0;
    u32 installed = 0;
    int protect = 0;
    bool leaf = true;
    bool lifted = false;
  };

  Record* find(u32 slot);
  Record& ensure(u32 slot, bool leaf);
  void sync(u32 slot, Record& rec);
  u32 derive(const Record& rec);
  void install(u32 slot, Record& rec);
  void settle(u32 slot);
  u32 substitute_for(u32 frame);
  void rebuild();
  void recompute_all();

  Machine& m_;
  std::set<u32> reserved_;
  std::vector<u32> substitutes_free_;
  std::map<u32, u32> remap_;
  std::unordered_map<u32, std::vector<u8>> snapshot_;  // frame -> 4 KiB
  std::map<u32, Record> records_;
  std::map<u32, int> record_pages_;
  std::set<u32> watch_;
  u32 directory_ = 0;
  bool have_directory_ = false;
  u64 pt_write_reconciles_ = 0;
};

}  // namespace hvsim
