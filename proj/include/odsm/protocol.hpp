#pragma once

#include <optional>
#include <variant>

#include "odsm/node.hpp"

namespace odsm {

// ---------------------------------------------------------------------------
// Access handles. An owner's colored global address lives in the node's slot
// table (a stable write-back target); the handle carries the slot. Shared and
// exclusive handles carry their fields inline, as in the pointer layout:
// a colored global address plus one extension word.
// ---------------------------------------------------------------------------

struct OwnerHandle {
  uint32_t slot = 0;
  uint64_t uid = 0;
  uint64_t hid = 0;
  bool live = false;
};

struct SharedHandle {
  uint64_t g = 0;           // frozen at creation
  uint64_t local_copy = 0;  // null until first remote dereference
  uint64_t uid = 0;
  uint64_t hid = 0;
  bool live = false;
};

struct ExclusiveHandle {
  uint64_t g = 0;
  uint64_t owner_ext = 0;  // U flag | owner g-field location
  uint64_t uid = 0;
  uint64_t hid = 0;
  bool live = false;
};

/// Owner-like handle for an object constrained to co-reside with its parent.
/// Valid while the group stays put; after a group move, re-derive children
/// through a TieGroupView.
struct TiedHandle {
  uint64_t g = 0;
  uint64_t ext = 0;  // U flag only
  uint64_t uid = 0;
  uint64_t hid = 0;
  bool live = false;
};

/// Local window over a whole tie group; hands out local addresses so
/// traversal skips per-access locality checks.
struct TieGroupView {
  struct Member {
    uint64_t colored_g = 0;
    uint64_t local_base = 0;
    uint64_t size = 0;
  };
  std::vector<Member> members;  // root first, then children in tie order
  bool via_cache = false;
  bool live = false;
};

enum class ProjectionMode : uint8_t { Shared, Exclusive };

struct StackRef {
  NodeId node = 0;
  uint32_t region = 0;
  uint32_t length = 0;
};

/// Copy-and-write-back access to a stack value or a sub-range of a heap
/// object (partial borrow).
struct ProjectedHandle {
  bool stack_origin = false;
  uint64_t origin = 0;       // record base (heap) or region id (stack)
  NodeId origin_node = 0;
  uint32_t owner_slot = 0;   // heap origin: containing owner, for the color bump
  uint32_t offset = 0;
  uint32_t length = 0;
  ProjectionMode mode = ProjectionMode::Shared;
  uint64_t local_base = 0;
  uint64_t uid = 0;
  uint64_t hid = 0;
  bool live = false;
};

// ---------------------------------------------------------------------------

namespace wire {

struct FetchItem {
  uint64_t base = 0;
  uint64_t colored_key = 0;
  uint64_t uid = 0;
  Bytes bytes;
  std::vector<uint64_t> children;

  void encode(Writer& w) const {
    w.u64(base);
    w.u64(colored_key);
    w.u64(uid);
    w.bytes(bytes);
    w.u32(uint32_t(children.size()));
    for (auto c : children) w.u64(c);
  }
  static FetchItem decode(Reader& r) {
    FetchItem it;
    it.base = r.u64();
    it.colored_key = r.u64();
    it.uid = r.u64();
    it.bytes = r.bytes();
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; i++) it.children.push_back(r.u64());
    return it;
  }
};

}  // namespace wire

/// The coherence protocol bound to one node: dereference/drop logic for every
/// handle kind, move/copy, ownership transfer, tie groups and projections,
/// plus the responder side of the data-plane messages. Responders run in the
/// node's delivery context, never on application tasks.
class ProtocolEngine {
 public:
  explicit ProtocolEngine(NodeRuntime& n) : n_(n) {
    n_.set_handler(MsgKind::FetchCopy, [this](Message&& m) { on_fetch_copy(std::move(m)); });
    n_.set_handler(MsgKind::MoveFetch, [this](Message&& m) { on_move_fetch(std::move(m)); });
    n_.set_handler(MsgKind::DeallocRequest, [this](Message&& m) { on_dealloc(std::move(m)); });
    n_.set_handler(MsgKind::OwnerWriteBack, [this](Message&& m) { on_owner_write_back(std::move(m)); });
    n_.set_handler(MsgKind::InvalidateNotice, [this](Message&& m) { on_invalidate(std::move(m)); });
    n_.set_handler(MsgKind::AllocRequest, [this](Message&& m) { on_alloc_request(std::move(m)); });
  }

  NodeRuntime& node() { return n_; }

  // --- creation ------------------------------------------------------------

  /// Registers a fresh owner for an object already resident in some
  /// partition (g colored 0). Allocation policy lives in the runtime layer.
  OwnerHandle register_owner(uint64_t g, uint64_t uid) {
    OwnerHandle p;
    p.slot = n_.slots().register_slot(g, uid);
    p.uid = uid;
    p.hid = n_.next_handle_id();
    p.live = true;
    obs().on_handle_create(uid, p.hid, HandleKind::Owner, n_.current_gid(), n_.id());
    return p;
  }

  uint64_t owner_g(const OwnerHandle& p) { return n_.slots().cell(p.slot).g; }

  OwnerHandle alloc_local(uint64_t size, std::span<const uint8_t> init = {}) {
    uint64_t uid = n_.next_uid();
    uint64_t base = n_.heap().alloc_raw(size, uid);
    obs().on_alloc(uid, n_.id(), base, size);
    if (!init.empty()) n_.heap().write_raw(base, init);
    return register_owner(base, uid);  // fresh objects carry color 0
  }

  // --- shared (immutable reference) ---------------------------------------

  SharedHandle make_shared(OwnerHandle& p) {
    OwnerCell& cell = n_.slots().cell(p.slot);
    SharedHandle r{cell.g, 0, p.uid, n_.next_handle_id(), true};
    close_epoch_if_marked(cell.ext, p.uid, cell.g);
    if (!n_.faults().skip_u_reset_on_share) cell.ext = clear_u_bit(cell.ext);
    obs().on_shared_created_from(p.uid, cell.g);
    obs().on_handle_create(p.uid, r.hid, HandleKind::Shared, n_.current_gid(), n_.id());
    return r;
  }

  SharedHandle make_shared(ExclusiveHandle& m) {
    SharedHandle r{m.g, 0, m.uid, n_.next_handle_id(), true};
    close_epoch_if_marked(m.owner_ext, m.uid, m.g);
    if (!n_.faults().skip_u_reset_on_share) m.owner_ext = clear_u_bit(m.owner_ext);
    obs().on_shared_created_from(m.uid, m.g);
    obs().on_handle_create(m.uid, r.hid, HandleKind::Shared, n_.current_gid(), n_.id());
    return r;
  }

  SharedHandle make_shared(const SharedHandle& src) {
    SharedHandle r{src.g, 0, src.uid, n_.next_handle_id(), true};
    obs().on_shared_created_from(src.uid, src.g);
    obs().on_handle_create(src.uid, r.hid, HandleKind::Shared, n_.current_gid(), n_.id());
    return r;
  }

  Co<uint64_t> shared_deref(SharedHandle& r) {
    check_live(r.live);
    obs().on_read_access(r.uid, r.hid, n_.current_gid());
    if (n_.local(r.g)) co_return addr().clear_color(r.g);
    if (r.local_copy != 0) co_return r.local_copy;
    r.local_copy = co_await n_.cache().acquire(cache_key(r.g), copy_fetch(r.g));
    co_return r.local_copy;
  }

  void shared_drop(SharedHandle& r) {
    check_live(r.live);
    if (r.local_copy != 0) n_.cache().release(cache_key(r.g));
    r.live = false;
    obs().on_handle_drop(r.uid, r.hid);
  }

  // --- exclusive (mutable reference) ---------------------------------------

  ExclusiveHandle make_exclusive(OwnerHandle& p) {
    OwnerCell& cell = n_.slots().cell(p.slot);
    release_owner_hold(cell);
    ExclusiveHandle m;
    m.g = cell.g;
    m.owner_ext = encode_owner_loc(n_.id(), p.slot);  // U clear: first deref bumps
    m.uid = p.uid;
    m.hid = n_.next_handle_id();
    m.live = true;
    obs().on_handle_create(p.uid, m.hid, HandleKind::Exclusive, n_.current_gid(), n_.id());
    return m;
  }

  Co<uint64_t> exclusive_deref(ExclusiveHandle& m) {
    check_live(m.live);
    if (n_.local(m.g)) {
      if (!color_updated(m.owner_ext)) {
        obs().on_epoch_open(m.uid, m.hid);
        m.owner_ext = set_u_bit(m.owner_ext);
        uint64_t color = addr().get_color(m.g);
        if (color == addr().max_color()) {
          m.g = relocate_local(addr().clear_color(m.g));  // move on overflow
        } else {
          m.g = addr().append_color(m.g, color + 1);
        }
      }
    } else {
      obs().on_epoch_open(m.uid, m.hid);
      m.owner_ext = set_u_bit(m.owner_ext);
      m.g = co_await move_object(addr().clear_color(m.g));
    }
    obs().on_write_access(m.uid, m.hid, n_.current_gid());
    co_return addr().clear_color(m.g);
  }

  /// Synchronous write-back: the drop completes only once the owner's
  /// g-field holds this handle's colored address.
  Co<Unit> exclusive_drop(ExclusiveHandle& m) {
    check_live(m.live);
    auto [owner_node, owner_slot] = decode_owner_loc(clear_u_bit(m.owner_ext));
    if (!n_.faults().skip_owner_writeback) {
      if (owner_node == n_.id()) {
        n_.slots().cell(owner_slot).g = m.g;
      } else {
        Writer w;
        w.u8(0);  // slot target
        w.u32(owner_slot);
        w.u64(m.g);
        co_await n_.request(owner_node, MsgKind::OwnerWriteBack, std::move(w.out));
      }
    }
    obs().on_epoch_close(m.uid, m.g);
    m.live = false;
    obs().on_handle_drop(m.uid, m.hid);
    co_return unit();
  }

  // --- owner access ---------------------------------------------------------

  Co<uint64_t> owner_read(OwnerHandle& p) {
    check_live(p.live);
    obs().on_read_access(p.uid, p.hid, n_.current_gid());
    OwnerCell& cell = n_.slots().cell(p.slot);
    if (n_.local(cell.g)) co_return addr().clear_color(cell.g);
    if (clear_u_bit(cell.ext) != 0) co_return clear_u_bit(cell.ext);
    uint64_t local = co_await n_.cache().acquire(cache_key(cell.g), copy_fetch(cell.g));
    OwnerCell& cell2 = n_.slots().cell(p.slot);
    cell2.ext = (cell2.ext & kUBit) | local;
    co_return local;
  }

  Co<uint64_t> owner_write(OwnerHandle& p) {
    check_live(p.live);
    OwnerCell& cell = n_.slots().cell(p.slot);
    if (n_.local(cell.g)) {
      if (!color_updated(cell.ext)) {
        obs().on_epoch_open(p.uid, p.hid);
        cell.ext = set_u_bit(cell.ext);
        uint64_t color = addr().get_color(cell.g);
        if (color == addr().max_color()) {
          cell.g = relocate_local(addr().clear_color(cell.g));
        } else {
          cell.g = addr().append_color(cell.g, color + 1);
        }
      }
    } else {
      release_owner_hold(cell);
      auto promoted = n_.cache().extract_for_promotion(cache_key(cell.g));
      obs().on_epoch_open(p.uid, p.hid);
      if (promoted) {
        // Cache-hit path: the local copy becomes the object; the remote
        // original dies. Address changed, so no color bump is needed.
        Writer w;
        w.u64(addr().clear_color(cell.g));
        n_.send_oneway(n_.home_of(cell.g), MsgKind::DeallocRequest, std::move(w.out));
        cell.g = *promoted;
        cell.ext = kUBit;
      } else {
        uint64_t moved = co_await move_object(addr().clear_color(cell.g));
        OwnerCell& c2 = n_.slots().cell(p.slot);
        c2.g = moved;
        c2.ext = kUBit;
      }
    }
    OwnerCell& cell3 = n_.slots().cell(p.slot);
    obs().on_write_access(p.uid, p.hid, n_.current_gid());
    co_return addr().clear_color(cell3.g);
  }

  /// Drops the owner: tied children and the record die at the object's host,
  /// which broadcasts invalidation notices.
  Co<Unit> owner_drop(OwnerHandle& p) {
    check_live(p.live);
    OwnerCell cell = n_.slots().cell(p.slot);  // copy before deregistration
    if (clear_u_bit(cell.ext) != 0) n_.cache().release(cache_key(cell.g));
    uint64_t base = addr().clear_color(cell.g);
    NodeId host = n_.home_of(cell.g);
    n_.slots().deregister(p.slot);
    p.live = false;
    obs().on_handle_drop(p.uid, p.hid);
    if (host == n_.id()) {
      free_with_events(base);
    } else {
      Writer w;
      w.u64(base);
      n_.send_oneway(host, MsgKind::DeallocRequest, std::move(w.out));
    }
    co_return unit();
  }

  // --- ownership transfer ----------------------------------------------------

  /// Source half of an ownership transfer: checks and resets the extension
  /// field, evicts this node's cached copy, and returns the wire value.
  PackedValue pack_owner(OwnerHandle& p) {
    check_live(p.live);
    OwnerCell cell = n_.slots().cell(p.slot);
    if (!n_.faults().skip_transfer_eviction) {
      if (clear_u_bit(cell.ext) != 0) n_.cache().release(cache_key(cell.g));
      if (!n_.local(cell.g)) evict_transfer_copy(cache_key(cell.g));
    }
    close_epoch_if_marked(cell.ext, p.uid, cell.g);
    n_.slots().deregister(p.slot);
    p.live = false;
    obs().on_handle_drop(p.uid, p.hid);
    PackedValue v;
    v.kind = PackedValue::Kind::Owner;
    v.a = cell.g;
    v.b = p.uid;
    return v;
  }

  OwnerHandle adopt_owner(const PackedValue& v) { return register_owner(v.a, v.b); }

  PackedValue pack_shared(SharedHandle& r) {
    check_live(r.live);
    if (r.local_copy != 0) n_.cache().release(cache_key(r.g));
    r.live = false;
    obs().on_handle_drop(r.uid, r.hid);
    PackedValue v;
    v.kind = PackedValue::Kind::Shared;
    v.a = r.g;
    v.b = r.uid;
    return v;
  }

  SharedHandle adopt_shared(const PackedValue& v) {
    SharedHandle r{v.a, 0, v.b, n_.next_handle_id(), true};
    obs().on_handle_create(v.b, r.hid, HandleKind::Shared, n_.current_gid(), n_.id());
    return r;
  }

  PackedValue pack_exclusive(ExclusiveHandle& m) {
    check_live(m.live);
    m.live = false;
    obs().on_handle_drop(m.uid, m.hid);
    PackedValue v;
    v.kind = PackedValue::Kind::Exclusive;
    v.a = m.g;
    v.b = m.owner_ext;
    v.c = m.uid;
    return v;
  }

  ExclusiveHandle adopt_exclusive(const PackedValue& v) {
    ExclusiveHandle m{v.a, v.b, v.c, n_.next_handle_id(), true};
    obs().on_handle_create(v.c, m.hid, HandleKind::Exclusive, n_.current_gid(), n_.id());
    return m;
  }

  PackedValue pack_tied(TiedHandle& t) {
    check_live(t.live);
    t.live = false;
    obs().on_handle_drop(t.uid, t.hid);
    PackedValue v;
    v.kind = PackedValue::Kind::Tied;
    v.a = t.g;
    v.b = t.ext;
    v.c = t.uid;
    return v;
  }

  TiedHandle adopt_tied(const PackedValue& v) {
    TiedHandle t{v.a, v.b, v.c, n_.next_handle_id(), true};
    obs().on_handle_create(v.c, t.hid, HandleKind::Tied, n_.current_gid(), n_.id());
    return t;
  }

  // --- move / copy ------------------------------------------------------------

  /// Relocates a remote object (with any tie group) into the local partition.
  /// One fetch round plus one asynchronous dealloc request; the old host
  /// frees and broadcasts invalidations when the dealloc lands.
  Co<uint64_t> move_object(uint64_t base) {
    if (n_.partitions().node_of_base(base) == n_.id())
      raise(Errc::bad_bounds, "move of already-local base");
    NodeId host = n_.home_of(base);
    Writer w;
    w.u64(base);
    Bytes body = co_await n_.request(host, MsgKind::MoveFetch, std::move(w.out));
    Reader r(body);
    uint32_t count = r.u32();
    std::vector<wire::FetchItem> items;
    for (uint32_t i = 0; i < count; i++) items.push_back(wire::FetchItem::decode(r));
    std::map<uint64_t, uint64_t> moved;  // old base -> new base
    for (auto& it : items) {
      uint64_t nb = n_.heap().alloc_raw(it.bytes.size(), it.uid);
      obs().on_alloc(it.uid, n_.id(), nb, it.bytes.size());
      n_.heap().write_raw(nb, it.bytes);
      moved[it.base] = nb;
    }
    for (auto& it : items) {
      AllocationRecord& rec = n_.heap().record(moved[it.base]);
      rec.colored_self = moved[it.base];  // color reset on relocation
      for (uint64_t child : it.children) rec.tie_children.push_back(moved.at(child));
    }
    Writer dw;
    dw.u64(base);
    n_.send_oneway(host, MsgKind::DeallocRequest, std::move(dw.out));
    co_return moved.at(base);
  }

  /// Snapshot of a remote object into the local cache region; the original
  /// and its global address are untouched. Exactly one data-plane message.
  Co<Bytes> copy_object(uint64_t base) {
    NodeId host = n_.home_of(base);
    Writer w;
    w.u64(base);
    w.u8(0);  // whole object
    w.u8(0);
    w.u32(0);
    w.u32(0);
    Bytes body = co_await n_.request(host, MsgKind::FetchCopy, std::move(w.out));
    Reader r(body);
    uint32_t count = r.u32();
    if (count != 1) raise(Errc::fetch_failed, "unexpected batch in plain copy");
    co_return wire::FetchItem::decode(r).bytes;
  }

  void move_on_overflow(OwnerHandle& p) {
    OwnerCell& cell = n_.slots().cell(p.slot);
    cell.g = relocate_local(addr().clear_color(cell.g));
    cell.ext = set_u_bit(cell.ext);
  }
  void move_on_overflow(ExclusiveHandle& m) {
    m.g = relocate_local(addr().clear_color(m.g));
    m.owner_ext = set_u_bit(m.owner_ext);
  }

  // --- tie groups -------------------------------------------------------------

  Co<TiedHandle> tied_alloc(OwnerHandle& parent, uint64_t size, std::span<const uint8_t> init = {}) {
    uint64_t pg = n_.slots().cell(parent.slot).g;
    co_return co_await tied_alloc_under(pg, size, init);
  }
  Co<TiedHandle> tied_alloc(TiedHandle& parent, uint64_t size, std::span<const uint8_t> init = {}) {
    check_live(parent.live);
    co_return co_await tied_alloc_under(parent.g, size, init);
  }

  /// Local-only access to a tied object; remote traversal goes through
  /// fetch_tie_group views.
  uint64_t tied_read(TiedHandle& t) {
    check_live(t.live);
    if (!n_.local(t.g)) raise(Errc::remote_tied_access, "tied read requires group locality");
    obs().on_read_access(t.uid, t.hid, n_.current_gid());
    return addr().clear_color(t.g);
  }

  uint64_t tied_write(TiedHandle& t) {
    check_live(t.live);
    if (!n_.local(t.g)) raise(Errc::remote_tied_access, "tied write requires group locality");
    if (!color_updated(t.ext)) {
      obs().on_epoch_open(t.uid, t.hid);
      t.ext = set_u_bit(t.ext);
      t.g = bump_color(t.g);
      n_.heap().record(addr().clear_color(t.g)).colored_self = t.g;
      obs().on_epoch_close(t.uid, t.g);
    }
    obs().on_write_access(t.uid, t.hid, n_.current_gid());
    return addr().clear_color(t.g);
  }

  void tied_drop(TiedHandle& t) {
    // Lifetime belongs to the parent; dropping the handle is bookkeeping only.
    check_live(t.live);
    t.live = false;
    obs().on_handle_drop(t.uid, t.hid);
  }

  Co<TieGroupView> fetch_tie_group(OwnerHandle& p) {
    check_live(p.live);
    OwnerCell& cell = n_.slots().cell(p.slot);
    obs().on_read_access(p.uid, p.hid, n_.current_gid());
    if (n_.local(cell.g)) co_return local_view(addr().clear_color(cell.g), cell.g);
    if (clear_u_bit(cell.ext) == 0) {
      uint64_t local = co_await n_.cache().acquire(cache_key(cell.g), group_fetch(cell.g));
      OwnerCell& c2 = n_.slots().cell(p.slot);
      c2.ext = (c2.ext & kUBit) | local;
    }
    co_return cached_view(cache_key(n_.slots().cell(p.slot).g));
  }

  Co<TieGroupView> fetch_tie_group(SharedHandle& r) {
    check_live(r.live);
    obs().on_read_access(r.uid, r.hid, n_.current_gid());
    if (n_.local(r.g)) co_return local_view(addr().clear_color(r.g), r.g);
    if (r.local_copy == 0)
      r.local_copy = co_await n_.cache().acquire(cache_key(r.g), group_fetch(r.g));
    co_return cached_view(cache_key(r.g));
  }

  void drop_view(TieGroupView& v) {
    if (!v.live) return;
    if (v.via_cache) {
      for (size_t i = 1; i < v.members.size(); i++) n_.cache().release(v.members[i].colored_g);
    }
    v.live = false;
  }

  // --- projections -------------------------------------------------------------

  Co<ProjectedHandle> projected_acquire(OwnerHandle& p, uint32_t offset, uint32_t len,
                                        ProjectionMode mode) {
    check_live(p.live);
    OwnerCell& cell = n_.slots().cell(p.slot);
    uint64_t base = addr().clear_color(cell.g);
    ProjectedHandle h;
    h.stack_origin = false;
    h.origin = base;
    h.origin_node = n_.home_of(cell.g);
    h.owner_slot = p.slot;
    h.offset = offset;
    h.length = len;
    h.mode = mode;
    h.uid = p.uid;
    h.hid = n_.next_handle_id();
    Bytes slice;
    if (h.origin_node == n_.id()) {
      ProjectionClaim c{false, base, offset, len, mode == ProjectionMode::Exclusive};
      if (n_.claim_overlaps(c)) raise(Errc::overlapping_projection, "overlapping live exclusive projection");
      if (mode == ProjectionMode::Exclusive) n_.add_claim(c);
      slice = n_.heap().read_raw(base + offset, len);
    } else {
      slice = co_await fetch_slice(h.origin_node, base, offset, len,
                                   mode == ProjectionMode::Exclusive, /*stack=*/false);
    }
    h.local_base = n_.heap().alloc_raw(len, p.uid);
    n_.heap().write_raw(h.local_base, slice);
    h.live = true;
    obs().on_handle_create(p.uid, h.hid, HandleKind::Projected, n_.current_gid(), n_.id());
    co_return h;
  }

  Co<ProjectedHandle> projected_acquire(const StackRef& ref, uint32_t offset, uint32_t len,
                                        ProjectionMode mode) {
    ProjectedHandle h;
    h.stack_origin = true;
    h.origin = ref.region;
    h.origin_node = ref.node;
    h.offset = offset;
    h.length = len;
    h.mode = mode;
    h.uid = (uint64_t(ref.node) << 48) | ref.region;  // stack values have no heap uid
    h.hid = n_.next_handle_id();
    Bytes slice;
    if (ref.node == n_.id()) {
      ProjectionClaim c{true, ref.region, offset, len, mode == ProjectionMode::Exclusive};
      if (n_.claim_overlaps(c)) raise(Errc::overlapping_projection, "overlapping live exclusive projection");
      if (mode == ProjectionMode::Exclusive) n_.add_claim(c);
      StackRegion& region = n_.stack_region(ref.region);
      if (offset + len > region.bytes.size()) raise(Errc::bad_bounds, "projection beyond stack region");
      slice.assign(region.bytes.begin() + offset, region.bytes.begin() + offset + len);
    } else {
      slice = co_await fetch_slice(ref.node, ref.region, offset, len,
                                   mode == ProjectionMode::Exclusive, /*stack=*/true);
    }
    h.local_base = n_.heap().alloc_raw(len, h.uid);
    n_.heap().write_raw(h.local_base, slice);
    h.live = true;
    obs().on_handle_create(h.uid, h.hid, HandleKind::Projected, n_.current_gid(), n_.id());
    co_return h;
  }

  uint64_t projected_addr(ProjectedHandle& h) {
    check_live(h.live);
    if (h.mode == ProjectionMode::Exclusive)
      obs().on_write_access(h.uid, h.hid, n_.current_gid());
    else
      obs().on_read_access(h.uid, h.hid, n_.current_gid());
    return h.local_base;
  }

  /// Exclusive release writes the copy back to the origin and atomically
  /// bumps the containing owner's color; shared release evicts eagerly.
  Co<Unit> projected_release(ProjectedHandle& h) {
    check_live(h.live);
    if (h.mode == ProjectionMode::Exclusive) {
      Bytes data = n_.heap().read_raw(h.local_base, h.length);
      if (h.origin_node == n_.id()) {
        write_back_local(h, data);
        n_.drop_claim({h.stack_origin, h.origin, h.offset, h.length, true});
      } else {
        Writer w;
        w.u8(h.stack_origin ? 2 : 1);
        w.u64(h.origin);
        w.u32(h.offset);
        w.bytes(data);
        co_await n_.request(h.origin_node, MsgKind::OwnerWriteBack, std::move(w.out));
      }
      if (!h.stack_origin) {
        // The projector holds the partial borrow, so the owner's field
        // cannot be concurrently mutated; this is the atomic increment.
        OwnerCell& cell = n_.slots().cell(h.owner_slot);
        cell.g = bump_color(cell.g);
        obs().on_epoch_close(h.uid, cell.g);
      }
    }
    n_.heap().free_local(h.local_base);
    h.live = false;
    obs().on_handle_drop(h.uid, h.hid);
    co_return unit();
  }

  // --- local byte access -----------------------------------------------------

  Bytes read_local(uint64_t address, uint64_t len) { return n_.heap().read_raw(address, len); }
  void write_local(uint64_t address, std::span<const uint8_t> data) {
    n_.heap().write_raw(address, data);
  }

 private:
  friend class RuntimeApi;

  Addressing addr() const { return n_.addressing(); }
  ProtocolObserver& obs() { return n_.observer(); }

  static void check_live(bool live) {
    if (!live) raise(Errc::already_dropped, "use of dropped handle");
  }

  uint64_t cache_key(uint64_t g) const {
    return n_.faults().strip_cache_color ? n_.addressing().clear_color(g) : g;
  }

  /// Color bump with saturation fallback: on wrap the stale keys cannot be
  /// distinguished, so the host's copies are invalidated explicitly.
  uint64_t bump_color(uint64_t g) {
    uint64_t color = addr().get_color(g);
    if (color == addr().max_color()) {
      Writer w;
      w.u64(addr().clear_color(g));
      n_.broadcast(MsgKind::InvalidateNotice, w.out);
      return addr().append_color(g, 0);
    }
    return addr().append_color(g, color + 1);
  }

  void release_owner_hold(OwnerCell& cell) {
    if (clear_u_bit(cell.ext) != 0) {
      n_.cache().release(cache_key(cell.g));
      cell.ext &= kUBit;
    }
  }

  void close_epoch_if_marked(uint64_t ext, uint64_t uid, uint64_t g) {
    if (color_updated(ext)) obs().on_epoch_close(uid, g);
  }

  void free_with_events(uint64_t base) {
    fire_free_events(base);
    n_.heap().free_raw(base);
  }
  void fire_free_events(uint64_t base) {
    AllocationRecord& rec = n_.heap().record(base);
    for (uint64_t child : rec.tie_children)
      if (n_.heap().has_live(child)) fire_free_events(child);
    obs().on_free(rec.uid, n_.id(), base);
  }

  /// Local relocation used by move-on-overflow: fresh base, color reset,
  /// old base invalidated cluster-wide via the free broadcast.
  uint64_t relocate_local(uint64_t old_base) {
    AllocationRecord& old_rec = n_.heap().record(old_base);
    uint64_t uid = old_rec.uid;
    Bytes bytes = old_rec.bytes;
    std::vector<uint64_t> children = std::move(old_rec.tie_children);
    old_rec.tie_children.clear();
    uint64_t nb = n_.heap().alloc_raw(bytes.size(), uid);
    obs().on_alloc(uid, n_.id(), nb, bytes.size());
    n_.heap().write_raw(nb, bytes);
    AllocationRecord& rec = n_.heap().record(nb);
    rec.tie_children = std::move(children);
    rec.colored_self = nb;
    obs().on_free(uid, n_.id(), old_base);
    n_.heap().free_raw(old_base);
    return nb;
  }

  void evict_transfer_copy(uint64_t key) {
    const CacheEntry* e = n_.cache().entry(key);
    if (!e) return;
    if (e->count > 0)
      raise(Errc::live_handle_violation, "ownership transfer with live shared handles");
    if (e->group_root) {
      // Members were installed by the same batch; drop them with the root.
      auto members = group_member_keys_[key];
      for (uint64_t mk : members) drop_count0_entry(mk);
    }
    drop_count0_entry(key);
  }

  void drop_count0_entry(uint64_t key) {
    const CacheEntry* e = n_.cache().entry(key);
    if (!e || e->count > 0) return;
    if (n_.cache().bump(key)) n_.cache().release(key);  // no-op guard for doomed entries
    // Evict by invalidating just this key's base when count is 0.
    auto extracted = n_.cache().extract_for_promotion(key);
    if (extracted) n_.heap().free_local(*extracted);
  }

  CacheMap::FetchFn copy_fetch(uint64_t g) {
    uint64_t base = addr().clear_color(g);
    return [this, base]() -> Co<CacheInstall> {
      Bytes bytes = co_await copy_object(base);
      uint64_t uid = fetched_uid_;
      uint64_t local = n_.heap().alloc_raw(bytes.size(), uid);
      obs().on_alloc(uid, n_.id(), local, bytes.size());
      n_.heap().write_raw(local, bytes);
      co_return CacheInstall{local, uid, false};
    };
  }

  CacheMap::FetchFn group_fetch(uint64_t g) {
    uint64_t base = addr().clear_color(g);
    uint64_t key = cache_key(g);
    return [this, base, key]() -> Co<CacheInstall> {
      Writer w;
      w.u64(base);
      w.u8(1);  // whole group
      w.u8(0);
      w.u32(0);
      w.u32(0);
      Bytes body = co_await n_.request(n_.partitions().node_of_base(base), MsgKind::FetchCopy,
                                       std::move(w.out));
      Reader r(body);
      uint32_t count = r.u32();
      CacheInstall install;
      std::vector<uint64_t> member_keys;
      for (uint32_t i = 0; i < count; i++) {
        wire::FetchItem it = wire::FetchItem::decode(r);
        if (i == 0) {
          uint64_t local = n_.heap().alloc_raw(it.bytes.size(), it.uid);
          obs().on_alloc(it.uid, n_.id(), local, it.bytes.size());
          n_.heap().write_raw(local, it.bytes);
          install = CacheInstall{local, it.uid, true};
          continue;
        }
        uint64_t child_key = cache_key(it.colored_key);
        member_keys.push_back(child_key);
        if (n_.cache().contains(child_key)) continue;
        uint64_t local = n_.heap().alloc_raw(it.bytes.size(), it.uid);
        obs().on_alloc(it.uid, n_.id(), local, it.bytes.size());
        n_.heap().write_raw(local, it.bytes);
        n_.cache().insert_member(child_key, local, it.uid);
      }
      group_member_keys_[key] = std::move(member_keys);
      co_return install;
    };
  }

  TieGroupView local_view(uint64_t root_base, uint64_t root_g) {
    TieGroupView v;
    v.via_cache = false;
    v.live = true;
    collect_local_members(root_base, root_g, v);
    return v;
  }
  void collect_local_members(uint64_t base, uint64_t colored, TieGroupView& v) {
    AllocationRecord& rec = n_.heap().record(base);
    v.members.push_back({colored, base, rec.size});
    for (uint64_t child : rec.tie_children)
      collect_local_members(child, n_.heap().record(child).colored_self, v);
  }

  TieGroupView cached_view(uint64_t root_key) {
    TieGroupView v;
    v.via_cache = true;
    v.live = true;
    const CacheEntry* root = n_.cache().entry(root_key);
    if (!root) raise(Errc::not_found, "group root not cached");
    v.members.push_back({root_key, root->local_base, n_.heap().record(root->local_base).size});
    for (uint64_t mk : group_member_keys_[root_key]) {
      if (!n_.cache().bump(mk)) raise(Errc::not_found, "group member evicted");
      const CacheEntry* e = n_.cache().entry(mk);
      v.members.push_back({mk, e->local_base, n_.heap().record(e->local_base).size});
    }
    return v;
  }

  Co<TiedHandle> tied_alloc_under(uint64_t parent_g, uint64_t size, std::span<const uint8_t> init) {
    uint64_t parent_base = addr().clear_color(parent_g);
    NodeId host = n_.home_of(parent_g);
    uint64_t uid = n_.next_uid();
    uint64_t base;
    if (host == n_.id()) {
      base = n_.heap().alloc_raw(size, uid);
      obs().on_alloc(uid, n_.id(), base, size);
      if (!init.empty()) n_.heap().write_raw(base, init);
      n_.heap().record(base).colored_self = base;
      n_.heap().record(parent_base).tie_children.push_back(base);
    } else {
      Writer w;
      w.u64(size);
      w.u64(uid);
      w.u64(parent_base);
      w.bytes(Bytes(init.begin(), init.end()));
      Bytes body = co_await n_.request(host, MsgKind::AllocRequest, std::move(w.out));
      Reader r(body);
      base = r.u64();
    }
    TiedHandle t{base, 0, uid, n_.next_handle_id(), true};
    obs().on_handle_create(uid, t.hid, HandleKind::Tied, n_.current_gid(), n_.id());
    co_return t;
  }

  Co<Bytes> fetch_slice(NodeId host, uint64_t origin, uint32_t offset, uint32_t len,
                        bool exclusive, bool stack) {
    Writer w;
    w.u64(origin);
    w.u8(stack ? 2 : 0);
    w.u8(exclusive ? 1 : 0);
    w.u32(offset);
    w.u32(len);
    Bytes body = co_await n_.request(host, MsgKind::FetchCopy, std::move(w.out));
    Reader r(body);
    uint32_t count = r.u32();
    if (count != 1) raise(Errc::fetch_failed, "unexpected batch in slice fetch");
    co_return wire::FetchItem::decode(r).bytes;
  }

  void write_back_local(const ProjectedHandle& h, const Bytes& data) {
    if (h.stack_origin) {
      StackRegion& region = n_.stack_region(uint32_t(h.origin));
      std::copy(data.begin(), data.end(), region.bytes.begin() + h.offset);
    } else {
      n_.heap().write_raw(h.origin + h.offset, data);
    }
  }

  // --- responders (dedicated delivery context) --------------------------------

  void on_fetch_copy(Message&& m) {
    Reader r(m.payload);
    uint64_t origin = r.u64();
    uint8_t mode = r.u8();  // 0 whole object, 1 whole group, 2 stack slice
    uint8_t exclusive = r.u8();
    uint32_t offset = r.u32();
    uint32_t len = r.u32();
    try {
      Writer w;
      if (mode == 2) {
        StackRegion& region = n_.stack_region(uint32_t(origin));
        if (offset + len > region.bytes.size()) raise(Errc::bad_bounds, "slice beyond region");
        if (exclusive) {
          ProjectionClaim c{true, origin, offset, len, true};
          if (n_.claim_overlaps(c))
            raise(Errc::overlapping_projection, "overlapping live exclusive projection");
          n_.add_claim(c);
        }
        wire::FetchItem it;
        it.base = origin;
        it.bytes.assign(region.bytes.begin() + offset, region.bytes.begin() + offset + len);
        w.u32(1);
        it.encode(w);
      } else if (len != 0) {
        AllocationRecord& rec = n_.heap().record(origin);
        if (offset + len > rec.size) raise(Errc::bad_bounds, "slice beyond record");
        if (exclusive) {
          ProjectionClaim c{false, origin, offset, len, true};
          if (n_.claim_overlaps(c))
            raise(Errc::overlapping_projection, "overlapping live exclusive projection");
          n_.add_claim(c);
        }
        wire::FetchItem it;
        it.base = origin;
        it.uid = rec.uid;
        it.bytes.assign(rec.bytes.begin() + offset, rec.bytes.begin() + offset + len);
        w.u32(1);
        it.encode(w);
      } else {
        std::vector<wire::FetchItem> items;
        collect_items(origin, mode == 1, items);
        w.u32(uint32_t(items.size()));
        for (auto& it : items) it.encode(w);
      }
      n_.reply_ok(m, std::move(w.out));
    } catch (const Error& e) {
      n_.reply_err(m, e.code());
    }
  }

  void collect_items(uint64_t base, bool group, std::vector<wire::FetchItem>& out) {
    AllocationRecord& rec = n_.heap().record(base);
    wire::FetchItem it;
    it.base = base;
    it.colored_key = rec.colored_self;
    it.uid = rec.uid;
    it.bytes = rec.bytes;
    if (group) it.children = rec.tie_children;
    out.push_back(std::move(it));
    if (group)
      for (uint64_t child : rec.tie_children) collect_items(child, true, out);
  }

  void on_move_fetch(Message&& m) {
    Reader r(m.payload);
    uint64_t base = r.u64();
    try {
      std::vector<wire::FetchItem> items;
      collect_items(base, /*group=*/true, items);
      Writer w;
      w.u32(uint32_t(items.size()));
      for (auto& it : items) it.encode(w);
      n_.reply_ok(m, std::move(w.out));
    } catch (const Error& e) {
      n_.reply_err(m, e.code());
    }
  }

  void on_dealloc(Message&& m) {
    Reader r(m.payload);
    uint64_t base = r.u64();
    n_.drop_claims_for(base, false);
    free_with_events(base);
  }

  void on_owner_write_back(Message&& m) {
    Reader r(m.payload);
    uint8_t target = r.u8();
    try {
      if (target == 0) {
        uint32_t slot = r.u32();
        uint64_t g = r.u64();
        n_.slots().cell(slot).g = g;
      } else if (target == 1) {
        uint64_t base = r.u64();
        uint32_t offset = r.u32();
        Bytes data = r.bytes();
        n_.heap().write_raw(base + offset, data);
        n_.drop_claim({false, base, offset, uint32_t(data.size()), true});
      } else {
        uint64_t region = r.u64();
        uint32_t offset = r.u32();
        Bytes data = r.bytes();
        StackRegion& sr = n_.stack_region(uint32_t(region));
        std::copy(data.begin(), data.end(), sr.bytes.begin() + offset);
        n_.drop_claim({true, region, offset, uint32_t(data.size()), true});
      }
      n_.reply_ok(m);
    } catch (const Error& e) {
      n_.reply_err(m, e.code());
    }
  }

  void on_invalidate(Message&& m) {
    Reader r(m.payload);
    uint64_t base = r.u64();
    n_.cache().invalidate_base(base);
  }

  void on_alloc_request(Message&& m) {
    Reader r(m.payload);
    uint64_t size = r.u64();
    uint64_t uid = r.u64();
    uint64_t tie_parent = r.u64();
    Bytes init = r.bytes();
    try {
      uint64_t base = n_.heap().alloc_raw(size, uid);
      obs().on_alloc(uid, n_.id(), base, size);
      if (!init.empty()) n_.heap().write_raw(base, init);
      if (tie_parent != 0) {
        n_.heap().record(base).colored_self = base;
        n_.heap().record(tie_parent).tie_children.push_back(base);
      }
      Writer w;
      w.u64(base);
      n_.reply_ok(m, std::move(w.out));
    } catch (const Error& e) {
      n_.reply_err(m, e.code());
    }
  }

  NodeRuntime& n_;
  std::map<uint64_t, std::vector<uint64_t>> group_member_keys_;
  uint64_t fetched_uid_ = 0;
};

}  // namespace odsm
