#pragma once

#include <cstdint>
#include <span>

#include "odsm/addressing.hpp"

namespace odsm {

enum class HandleKind : uint8_t { Owner, Shared, Exclusive, Tied, Projected };

inline const char* handle_kind_name(HandleKind k) {
  switch (k) {
    case HandleKind::Owner: return "owner";
    case HandleKind::Shared: return "shared";
    case HandleKind::Exclusive: return "exclusive";
    case HandleKind::Tied: return "tied";
    case HandleKind::Projected: return "projected";
  }
  return "?";
}

/// Protocol event sink. The verifier installs an invariant monitor here;
/// normal runs keep the default no-op.
class ProtocolObserver {
 public:
  virtual ~ProtocolObserver() = default;

  virtual void on_alloc(uint64_t /*uid*/, NodeId /*node*/, uint64_t /*base*/, uint64_t /*size*/) {}
  virtual void on_free(uint64_t /*uid*/, NodeId /*node*/, uint64_t /*base*/) {}

  virtual void on_handle_create(uint64_t /*uid*/, uint64_t /*hid*/, HandleKind /*kind*/,
                                uint64_t /*task*/, NodeId /*node*/) {}
  virtual void on_handle_drop(uint64_t /*uid*/, uint64_t /*hid*/) {}

  virtual void on_read_access(uint64_t /*uid*/, uint64_t /*hid*/, uint64_t /*task*/) {}
  virtual void on_write_access(uint64_t /*uid*/, uint64_t /*hid*/, uint64_t /*task*/) {}

  // A write epoch opens when an entity's U flag transitions clear->set (or a
  // move relocates the object); it closes when the updated colored address
  // becomes the owner's canonical one (write-back, U reset, drop, transfer).
  virtual void on_epoch_open(uint64_t /*uid*/, uint64_t /*hid*/) {}
  virtual void on_epoch_close(uint64_t /*uid*/, uint64_t /*colored_g*/) {}

  virtual void on_shared_created_from(uint64_t /*uid*/, uint64_t /*captured_g*/) {}

  virtual uint64_t cache_install_token(uint64_t /*uid*/) { return 0; }
  virtual void on_cache_hit(NodeId /*node*/, uint64_t /*key*/, uint64_t /*uid*/, uint64_t /*token*/) {}
  virtual void on_cache_acquire(NodeId /*node*/, uint64_t /*key*/) {}
  virtual void on_cache_release(NodeId /*node*/, uint64_t /*key*/) {}
  virtual void on_cache_evict(NodeId /*node*/, uint64_t /*key*/) {}

  virtual void on_violation(const char* /*invariant*/, std::string /*detail*/) {}
};

inline ProtocolObserver& null_observer() {
  static ProtocolObserver obs;
  return obs;
}

/// Deliberate protocol mutations for the verifier's sensitivity suite. Each
/// flag disables one coherence step; the invariant checks must catch all five.
struct FaultPlan {
  bool skip_owner_writeback = false;
  bool strip_cache_color = false;
  bool skip_u_reset_on_share = false;
  bool skip_transfer_eviction = false;
  bool skip_invalidate_on_free = false;

  static FaultPlan by_name(const std::string& name) {
    FaultPlan f;
    if (name == "skip-writeback") f.skip_owner_writeback = true;
    else if (name == "strip-cache-color") f.strip_cache_color = true;
    else if (name == "skip-u-reset") f.skip_u_reset_on_share = true;
    else if (name == "skip-transfer-eviction") f.skip_transfer_eviction = true;
    else if (name == "skip-invalidate") f.skip_invalidate_on_free = true;
    else raise(Errc::config_error, "unknown mutation '" + name + "'");
    return f;
  }
  static const std::array<const char*, 5>& names() {
    static const std::array<const char*, 5> n = {"skip-writeback", "strip-cache-color", "skip-u-reset",
                                                 "skip-transfer-eviction", "skip-invalidate"};
    return n;
  }
};

}  // namespace odsm
