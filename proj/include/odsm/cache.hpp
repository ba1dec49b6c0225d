#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>

#include "odsm/addressing.hpp"
#include "odsm/coro.hpp"
#include "odsm/errors.hpp"
#include "odsm/observer.hpp"

namespace odsm {

/// Node-facing services the cache needs: parking the current task on a local
/// event, waking parked tasks, and reclaiming copy storage from the local
/// heap partition.
class CacheHost {
 public:
  virtual ~CacheHost() = default;
  virtual Co<Unit> park(WaitQueue& q) = 0;
  virtual void wake_all(WaitQueue& q) = 0;
  virtual void free_copy(uint64_t local_base) = 0;
  virtual ProtocolObserver& observer() = 0;
  virtual NodeId node_id() const = 0;
};

struct CacheEntry {
  uint64_t local_base = 0;
  uint32_t count = 0;
  bool doomed = false;       // invalidated while referenced; reclaimed at last release
  bool group_root = false;   // installed by a tie-group batch fetch
  uint64_t uid = 0;
  uint64_t install_token = 0;
};

/// What a fetch procedure hands back after copying a remote object into the
/// local heap partition.
struct CacheInstall {
  uint64_t local_base = 0;
  uint64_t uid = 0;
  bool group_root = false;
};

/// The per-node read-only cache: colored global address -> (local copy,
/// live shared-handle count). Lookup+update is atomic with respect to other
/// tasks on the node; a miss with a fetch already in flight parks the caller
/// instead of fetching again.
class CacheMap {
 public:
  CacheMap() = default;
  void bind(CacheHost* host, Addressing addr) {
    host_ = host;
    addr_ = addr;
  }

  using FetchFn = std::function<Co<CacheInstall>()>;

  Co<uint64_t> acquire(uint64_t g, FetchFn fetch) {
    if (g == kNullAddress) raise(Errc::null_address, "cache acquire of null");
    for (;;) {
      auto it = entries_.find(g);
      if (it != entries_.end() && !it->second.doomed) {
        it->second.count++;
        host_->observer().on_cache_acquire(host_->node_id(), g);
        host_->observer().on_cache_hit(host_->node_id(), g, it->second.uid, it->second.install_token);
        co_return it->second.local_base;
      }
      auto pit = pending_.find(g);
      if (pit == pending_.end()) break;  // no fetch in flight: this task fetches
      co_await host_->park(pit->second.waiters);
      // Loop: on success the entry is present; on failure this waiter retries.
    }

    pending_[g];
    try {
      CacheInstall got = co_await fetch();
      CacheEntry e;
      e.local_base = got.local_base;
      e.count = 1;
      e.group_root = got.group_root;
      e.uid = got.uid;
      e.install_token = host_->observer().cache_install_token(got.uid);
      insert_entry(g, e);
      host_->observer().on_cache_acquire(host_->node_id(), g);
      finish_pending(g);
      co_return got.local_base;
    } catch (...) {
      finish_pending(g);
      throw;
    }
  }

  /// Inserts a count-0 entry for a tie-group member installed by a batch
  /// fetch. The caller pins members afterwards via bump().
  void insert_member(uint64_t colored_g, uint64_t local_base, uint64_t uid) {
    if (entries_.count(colored_g)) return;  // already resident from an earlier batch
    CacheEntry e;
    e.local_base = local_base;
    e.count = 0;
    e.uid = uid;
    e.install_token = host_->observer().cache_install_token(uid);
    insert_entry(colored_g, e);
  }

  bool bump(uint64_t g) {
    auto it = entries_.find(g);
    if (it == entries_.end() || it->second.doomed) return false;
    it->second.count++;
    host_->observer().on_cache_acquire(host_->node_id(), g);
    host_->observer().on_cache_hit(host_->node_id(), g, it->second.uid, it->second.install_token);
    return true;
  }

  void mark_group_root(uint64_t g) {
    auto it = entries_.find(g);
    if (it != entries_.end()) it->second.group_root = true;
  }

  /// Evicts a count-0 entry (any kind) and frees its copy. False if absent
  /// or still referenced.
  bool evict_if_unreferenced(uint64_t g) {
    auto it = entries_.find(g);
    if (it == entries_.end() || it->second.count > 0) return false;
    evict(it);
    return true;
  }

  void release(uint64_t g) {
    auto it = entries_.find(g);
    if (it == entries_.end() || it->second.count == 0)
      raise(Errc::release_without_acquire, "release without matching acquire");
    it->second.count--;
    host_->observer().on_cache_release(host_->node_id(), g);
    if (it->second.count == 0 && it->second.doomed) evict(it);
  }

  /// Cache-hit path of mutable owner access: hands the count-0 local copy to
  /// the caller, who re-registers it as an owned object. A non-zero count
  /// here means some live shared handle still reads the copy (SWMR breach).
  std::optional<uint64_t> extract_for_promotion(uint64_t g) {
    auto it = entries_.find(g);
    if (it == entries_.end() || it->second.doomed) return std::nullopt;
    if (it->second.group_root) return std::nullopt;  // groups relocate as one batch
    if (it->second.count > 0)
      raise(Errc::swmr_violation, "promotion of a copy with live shared handles");
    uint64_t base = it->second.local_base;
    host_->observer().on_cache_evict(host_->node_id(), g);
    entries_.erase(it);
    return base;
  }

  /// Drops every entry whose base offset matches a freed object. Referenced
  /// entries are doomed and go at their final release.
  void invalidate_base(uint64_t base) {
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (addr_.clear_color(it->first) == base) {
        if (it->second.count == 0) {
          it = evict(it);
          continue;
        }
        it->second.doomed = true;
      }
      ++it;
    }
  }

  uint64_t sweep_unreferenced() {
    uint64_t freed = 0;
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->second.count == 0) {
        it = evict(it);
        freed++;
      } else {
        ++it;
      }
    }
    return freed;
  }

  bool contains(uint64_t g) const {
    auto it = entries_.find(g);
    return it != entries_.end() && !it->second.doomed;
  }
  const CacheEntry* entry(uint64_t g) const {
    auto it = entries_.find(g);
    return it == entries_.end() ? nullptr : &it->second;
  }
  size_t size() const { return entries_.size(); }
  uint64_t total_count() const {
    uint64_t n = 0;
    for (auto& [g, e] : entries_) n += e.count;
    return n;
  }
  const std::map<uint64_t, CacheEntry>& entries() const { return entries_; }

  /// Copy uniqueness audit: no two entries share a local base.
  bool audit_unique_copies() const {
    std::map<uint64_t, int> seen;
    for (auto& [g, e] : entries_)
      if (++seen[e.local_base] > 1) return false;
    return true;
  }

 private:
  struct Pending {
    WaitQueue waiters;
  };

  std::map<uint64_t, CacheEntry>::iterator evict(std::map<uint64_t, CacheEntry>::iterator it) {
    host_->observer().on_cache_evict(host_->node_id(), it->first);
    host_->free_copy(it->second.local_base);
    return entries_.erase(it);
  }

  void insert_entry(uint64_t g, CacheEntry e) { entries_[g] = e; }

  void finish_pending(uint64_t g) {
    auto it = pending_.find(g);
    if (it == pending_.end()) return;
    host_->wake_all(it->second.waiters);
    pending_.erase(it);
  }

  CacheHost* host_ = nullptr;
  Addressing addr_;
  std::map<uint64_t, CacheEntry> entries_;
  std::map<uint64_t, Pending> pending_;
};

}  // namespace odsm
