#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "odsm/addressing.hpp"
#include "odsm/errors.hpp"
#include "odsm/message.hpp"

namespace odsm {

/// One object (or cached copy) resident in a node's heap partition.
/// `tie_children` lists the bases of objects tied to this one; they live on
/// the same node and move/free with it. `colored_self` is the host-recorded
/// colored address of a tied child, which batch fetches hand to readers so
/// their cache keys stay version-accurate.
struct AllocationRecord {
  uint64_t base = 0;
  uint64_t size = 0;
  Bytes bytes;
  bool live = false;
  uint64_t uid = 0;
  std::vector<uint64_t> tie_children;
  uint64_t colored_self = 0;
};

/// Per-node slice of the global heap. One mutator context per node: callers
/// serialize through the node's cooperative scheduler, so no locking here.
class HeapPartition {
 public:
  HeapPartition() = default;
  HeapPartition(NodeId node, uint64_t lo, uint64_t hi) { reset(node, lo, hi); }

  void reset(NodeId node, uint64_t lo, uint64_t hi) {
    node_ = node;
    lo_ = lo;
    hi_ = hi;
    // base 0 is the null address; keep it out of node 0's allocatable range.
    cursor_ = (lo == 0) ? 16 : lo;
    table_.clear();
    reuse_.clear();
    used_ = 0;
  }

  NodeId node() const { return node_; }
  uint64_t capacity() const { return hi_ - lo_; }
  uint64_t used_bytes() const { return used_; }
  double used_ratio() const { return double(used_) / double(capacity()); }
  size_t live_records() const {
    size_t n = 0;
    for (auto& [b, r] : table_)
      if (r.live) n++;
    return n;
  }

  /// Called after an owned record dies so other nodes can drop cached copies.
  std::function<void(uint64_t base)> on_free_broadcast;

  /// Scheduler quantum, advanced by the node runtime. A freed base becomes
  /// reusable only in a later quantum than its invalidation notice.
  uint64_t quantum = 0;

  uint64_t alloc_raw(uint64_t size, uint64_t uid) {
    if (size == 0) raise(Errc::bad_bounds, "alloc_raw of zero bytes");
    uint64_t base = 0;
    uint64_t aligned = (size + 15) & ~15ull;
    if (cursor_ + aligned <= hi_ && used_ + size <= capacity()) {
      base = cursor_;
      cursor_ += aligned;
    } else {
      for (auto it = reuse_.begin(); it != reuse_.end(); ++it) {
        if (it->size >= size && it->quantum < quantum) {
          base = it->base;
          table_.erase(base);
          reuse_.erase(it);
          break;
        }
      }
    }
    if (base == 0 || used_ + size > capacity())
      raise(Errc::out_of_memory, "partition " + std::to_string(node_) + " full");
    AllocationRecord rec;
    rec.base = base;
    rec.size = size;
    rec.bytes.assign(size, 0);
    rec.live = true;
    rec.uid = uid;
    table_[base] = std::move(rec);
    used_ += size;
    return base;
  }

  /// Frees an owned record and its tied children, issuing one invalidation
  /// notice per freed base.
  void free_raw(uint64_t base) { free_impl(base, /*broadcast=*/true); }

  /// Frees a node-local cache copy; no cluster-visible effect.
  void free_local(uint64_t base) { free_impl(base, /*broadcast=*/false); }

  AllocationRecord& record(uint64_t base) {
    auto it = table_.find(base);
    if (it == table_.end()) raise(Errc::unknown_base, "no record at base 0x" + PartitionMap::to_hex(base));
    if (!it->second.live) raise(Errc::dead_object, "record at 0x" + PartitionMap::to_hex(base) + " is dead");
    return it->second;
  }

  bool has_live(uint64_t base) const {
    auto it = table_.find(base);
    return it != table_.end() && it->second.live;
  }

  /// Finds the live record containing `addr` (projections read mid-record).
  AllocationRecord& locate(uint64_t addr) {
    auto it = table_.upper_bound(addr);
    if (it == table_.begin()) raise(Errc::unknown_base, "address below partition contents");
    --it;
    AllocationRecord& r = it->second;
    if (addr >= r.base + r.size) raise(Errc::unknown_base, "address 0x" + PartitionMap::to_hex(addr) + " unmapped");
    if (!r.live) raise(Errc::dead_object, "read/write on dead record");
    return r;
  }

  Bytes read_raw(uint64_t addr, uint64_t len) {
    AllocationRecord& r = locate(addr);
    if (addr + len > r.base + r.size) raise(Errc::bad_bounds, "read past end of record");
    uint64_t off = addr - r.base;
    return Bytes(r.bytes.begin() + off, r.bytes.begin() + off + len);
  }

  void write_raw(uint64_t addr, std::span<const uint8_t> data) {
    if (data.empty()) return;
    AllocationRecord& r = locate(addr);
    if (addr + data.size() > r.base + r.size) raise(Errc::bad_bounds, "write past end of record");
    std::copy(data.begin(), data.end(), r.bytes.begin() + (addr - r.base));
  }

  /// Test hook: live ranges must be pairwise disjoint.
  bool audit_disjoint() const {
    uint64_t prev_end = 0;
    for (auto& [b, r] : table_) {
      if (!r.live) continue;
      if (b < prev_end) return false;
      prev_end = b + r.size;
    }
    return true;
  }

  const std::map<uint64_t, AllocationRecord>& table() const { return table_; }

 private:
  struct Reusable {
    uint64_t base;
    uint64_t size;
    uint64_t quantum;
  };

  void free_impl(uint64_t base, bool broadcast) {
    auto it = table_.find(base);
    if (it == table_.end()) raise(Errc::unknown_base, "free of unknown base");
    AllocationRecord& r = it->second;
    if (!r.live) raise(Errc::double_free, "base 0x" + PartitionMap::to_hex(base) + " already freed");
    // Children go first; each free issues its own notice.
    for (uint64_t child : r.tie_children)
      if (has_live(child)) free_impl(child, broadcast);
    r.live = false;
    r.bytes.clear();
    used_ -= r.size;
    reuse_.push_back({base, r.size, quantum});
    if (broadcast && on_free_broadcast) on_free_broadcast(base);
  }

  NodeId node_ = 0;
  uint64_t lo_ = 0, hi_ = 0, cursor_ = 0, used_ = 0;
  std::map<uint64_t, AllocationRecord> table_;
  std::vector<Reusable> reuse_;
};

}  // namespace odsm
