#pragma once

#include <algorithm>
#include <cassert>
#include <coroutine>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "odsm/addressing.hpp"
#include "odsm/cache.hpp"
#include "odsm/config.hpp"
#include "odsm/coro.hpp"
#include "odsm/errors.hpp"
#include "odsm/heap.hpp"
#include "odsm/message.hpp"
#include "odsm/observer.hpp"

namespace odsm {

class NodeRuntime;
class TaskContext;

using TaskGid = uint64_t;
inline TaskGid make_gid(NodeId node, uint32_t seq) { return (uint64_t(node) << 32) | seq; }
inline NodeId gid_origin(TaskGid g) { return NodeId(g >> 32); }

// ---------------------------------------------------------------------------
// Packed values: the wire form of task arguments, channel payloads and
// migration checkpoints. Handles travel as these; adoption back into typed
// handles happens in the protocol layer on the receiving node.
// ---------------------------------------------------------------------------

struct PackedValue {
  enum class Kind : uint8_t {
    U64 = 0,
    Buf,
    Owner,        // a=colored g, b=uid
    Shared,       // a=colored g, b=uid, c=local copy (reset on transfer)
    Exclusive,    // a=colored g, b=owner ext word, c=uid
    Tied,         // a=colored g, b=u ext, c=uid
    Channel,      // a=channel id
    Mutex,        // a=meta base, b=host slot encoding
    Atomic,       // a=value base
    SharedCount,  // a=counter base, b=object colored g, c=uid
  };
  Kind kind = Kind::U64;
  uint64_t a = 0, b = 0, c = 0, d = 0;
  Bytes buf;

  void encode(Writer& w) const {
    w.u8(uint8_t(kind));
    w.u64(a);
    w.u64(b);
    w.u64(c);
    w.u64(d);
    w.bytes(buf);
  }
  static PackedValue decode(Reader& r) {
    PackedValue v;
    v.kind = Kind(r.u8());
    v.a = r.u64();
    v.b = r.u64();
    v.c = r.u64();
    v.d = r.u64();
    v.buf = r.bytes();
    return v;
  }
  static PackedValue of_u64(uint64_t x) {
    PackedValue v;
    v.kind = Kind::U64;
    v.a = x;
    return v;
  }
  static PackedValue of_buf(Bytes b) {
    PackedValue v;
    v.kind = Kind::Buf;
    v.buf = std::move(b);
    return v;
  }
};

inline void encode_values(Writer& w, const std::vector<PackedValue>& vs) {
  w.u32(uint32_t(vs.size()));
  for (auto& v : vs) v.encode(w);
}
inline std::vector<PackedValue> decode_values(Reader& r) {
  uint32_t n = r.u32();
  std::vector<PackedValue> vs;
  vs.reserve(n);
  for (uint32_t i = 0; i < n; i++) vs.push_back(PackedValue::decode(r));
  return vs;
}

/// A task as it travels: registered function, identity, arguments and the
/// resumption state captured at the last checkpointed yield.
struct TaskDescriptor {
  uint32_t fn_id = 0;
  TaskGid gid = 0;
  std::vector<PackedValue> args;
  Bytes checkpoint;

  void encode(Writer& w) const {
    w.u32(fn_id);
    w.u64(gid);
    encode_values(w, args);
    w.bytes(checkpoint);
  }
  static TaskDescriptor decode(Reader& r) {
    TaskDescriptor d;
    d.fn_id = r.u32();
    d.gid = r.u64();
    d.args = decode_values(r);
    d.checkpoint = r.bytes();
    return d;
  }
};

struct TaskArgs {
  std::vector<PackedValue> values;
  Bytes checkpoint;  // empty on first start, task-defined after migration
};

using TaskFn = std::function<Co<Bytes>(TaskContext&, TaskArgs)>;

/// Name -> function table, installed identically on every node at startup.
class FunctionRegistry {
 public:
  uint32_t add(std::string name, TaskFn fn) {
    uint32_t id = uint32_t(fns_.size());
    fns_.push_back(std::move(fn));
    by_name_[std::move(name)] = id;
    return id;
  }
  uint32_t id_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) raise(Errc::unknown_function, name);
    return it->second;
  }
  const TaskFn& fn(uint32_t id) const {
    if (id >= fns_.size()) raise(Errc::unknown_function, "fn id " + std::to_string(id));
    return fns_[id];
  }

 private:
  std::vector<TaskFn> fns_;
  std::map<std::string, uint32_t> by_name_;
};

// ---------------------------------------------------------------------------

enum class TaskState : uint8_t { Runnable, Running, AwaitReply, ParkedEvent, Done };

struct TaskRecord {
  TaskGid gid = 0;
  uint32_t fn_id = 0;
  Co<Bytes> root;
  bool started = false;
  bool done = false;
  std::coroutine_handle<> resume_handle{};
  TaskState state = TaskState::Runnable;
  uint32_t awaited_corr = 0;
  Message reply_slot;

  // Migration: valid only while parked at a checkpointed yield.
  bool at_checkpoint = false;
  std::vector<PackedValue> checkpoint_refs;
  Bytes checkpoint_state;

  // Join plumbing: where to deliver the result.
  NodeId join_reply_to = 0;
  uint32_t join_corr = 0;
  bool wants_join_reply = false;

  // Filled by the runtime when the root coroutine completes.
  Bytes result;
  bool failed = false;
  std::string error;
  Errc error_code = Errc::ok;

  // Stats feeding the controller's policies.
  uint64_t remote_requests = 0;
  uint64_t remote_requests_window = 0;
  std::map<NodeId, uint64_t> access_by_node;
  uint64_t live_local_bytes = 0;
};

struct OwnerCell {
  uint64_t g = 0;
  uint64_t ext = 0;
  uint64_t uid = 0;
  bool live = false;
  bool runtime_owned = false;  // e.g. a mutex's guarded object; not a program handle
};

/// Owner g-fields live here so a write-back has a stable target even though
/// owner handles themselves sit on task stacks.
class SlotTable {
 public:
  uint32_t register_slot(uint64_t g, uint64_t uid, bool runtime_owned = false) {
    uint32_t id = next_++;
    cells_[id] = OwnerCell{g, 0, uid, true, runtime_owned};
    return id;
  }
  OwnerCell& cell(uint32_t slot) {
    auto it = cells_.find(slot);
    if (it == cells_.end() || !it->second.live)
      raise(Errc::already_dropped, "owner slot " + std::to_string(slot) + " not live");
    return it->second;
  }
  void deregister(uint32_t slot) { cells_.erase(slot); }
  size_t live_count(bool include_runtime = false) const {
    size_t n = 0;
    for (auto& [id, c] : cells_)
      if (c.live && (include_runtime || !c.runtime_owned)) n++;
    return n;
  }
  const std::map<uint32_t, OwnerCell>& cells() const { return cells_; }

 private:
  std::map<uint32_t, OwnerCell> cells_;
  uint32_t next_ = 1;
};

inline uint64_t encode_owner_loc(NodeId node, uint32_t slot) {
  return (uint64_t(node) << 32) | slot;
}
inline std::pair<NodeId, uint32_t> decode_owner_loc(uint64_t payload) {
  return {NodeId(payload >> 32), uint32_t(payload & 0xffffffffu)};
}

/// Stack regions: task-local buffers that projections may borrow.
struct StackRegion {
  TaskGid task = 0;
  Bytes bytes;
};

struct ProjectionClaim {
  bool stack_origin = false;
  uint64_t origin = 0;  // record base or stack region id
  uint32_t offset = 0;
  uint32_t length = 0;
  bool exclusive = false;
};

// ---------------------------------------------------------------------------
// NodeRuntime: one simulated (or real, on TCP) server. Owns the heap
// partition, cache, slots, scheduler and message dispatch. Strictly
// single-threaded; concurrency is cooperative.
// ---------------------------------------------------------------------------

class Fabric {
 public:
  virtual ~Fabric() = default;
  virtual void submit(Message m) = 0;
};

class NodeRuntime final : public CacheHost {
 public:
  NodeRuntime(NodeId id, const ClusterConfig& cfg, Fabric& fabric, FunctionRegistry& registry,
              ProtocolObserver& obs, const FaultPlan& faults)
      : id_(id),
        cfg_(&cfg),
        addr_(cfg.addressing()),
        parts_(cfg.partition_map()),
        fabric_(&fabric),
        registry_(&registry),
        obs_(&obs),
        faults_(&faults) {
    heap_.reset(id, parts_.lo(id), parts_.hi(id));
    cache_.bind(this, addr_);
    heap_.on_free_broadcast = [this](uint64_t base) {
      if (faults_->skip_invalidate_on_free) return;
      Writer w;
      w.u64(base);
      broadcast(MsgKind::InvalidateNotice, w.out);
      cache_.invalidate_base(base);  // local copies of a re-hosted object
    };
  }

  NodeRuntime(const NodeRuntime&) = delete;

  NodeId id() const { return id_; }
  const ClusterConfig& config() const { return *cfg_; }
  const Addressing& addressing() const { return addr_; }
  const PartitionMap& partitions() const { return parts_; }
  HeapPartition& heap() { return heap_; }
  CacheMap& cache() { return cache_; }
  SlotTable& slots() { return slots_; }
  TransportCounters& counters() { return counters_; }
  FunctionRegistry& registry() { return *registry_; }
  const FaultPlan& faults() const { return *faults_; }
  uint64_t quantum() const { return quantum_; }

  ProtocolObserver& observer() override { return *obs_; }
  NodeId node_id() const override { return id_; }
  void free_copy(uint64_t local_base) override { heap_.free_local(local_base); }

  bool local(uint64_t g) const { return is_local(addr_, parts_, g, id_); }
  NodeId home_of(uint64_t g) const { return node_of(addr_, parts_, g); }

  uint64_t next_uid() { return (uint64_t(id_) << 40) | next_uid_++; }
  uint64_t next_handle_id() { return (uint64_t(id_) << 40) | next_hid_++; }
  uint32_t next_correlation() { return next_corr_++; }

  // --- messaging ---------------------------------------------------------

  using Handler = std::function<void(Message&&)>;
  void set_handler(MsgKind k, Handler h) { handlers_[size_t(k)] = std::move(h); }

  void send_raw(Message m) {
    if (m.dst == id_) raise(Errc::unknown_node, "self-send not supported");
    if (m.dst >= parts_.node_count) raise(Errc::unknown_node, "node " + std::to_string(m.dst));
    counters_.on_send(m);
    fabric_->submit(std::move(m));
  }

  void send_oneway(NodeId dst, MsgKind kind, Bytes payload) {
    send_raw(Message{kind, id_, dst, kFlagOneWay, 0, std::move(payload)});
  }

  void broadcast(MsgKind kind, const Bytes& payload) {
    for (NodeId n = 0; n < parts_.node_count; n++)
      if (n != id_) send_raw(Message{kind, id_, n, kFlagOneWay, 0, payload});
  }

  void reply_ok(const Message& req, Bytes body = {}) {
    Bytes payload;
    payload.push_back(0);
    payload.insert(payload.end(), body.begin(), body.end());
    send_raw(Message{req.kind, id_, req.src, kFlagReply, req.correlation, std::move(payload)});
  }
  void reply_err(const Message& req, Errc code) {
    Bytes payload;
    payload.push_back(uint8_t(code));
    send_raw(Message{req.kind, id_, req.src, kFlagReply, req.correlation, std::move(payload)});
  }
  void reply_deferred(NodeId dst, MsgKind kind, uint32_t corr, Bytes body) {
    Bytes payload;
    payload.push_back(0);
    payload.insert(payload.end(), body.begin(), body.end());
    send_raw(Message{kind, id_, dst, kFlagReply, corr, std::move(payload)});
  }

  /// Request/reply: parks only the calling task until the reply lands.
  Co<Bytes> request(NodeId dst, MsgKind kind, Bytes payload) {
    uint32_t corr = next_correlation();
    if (current_) {
      TaskRecord& rec = *current_;
      rec.remote_requests++;
      rec.remote_requests_window++;
      rec.access_by_node[dst]++;
    }
    send_raw(Message{kind, id_, dst, 0, corr, std::move(payload)});
    Message rep = co_await await_reply(corr);
    Reader r(rep.payload);
    uint8_t status = r.u8();
    if (status != 0) raise(Errc(status), std::string("request ") + msg_kind_name(kind) + " failed");
    co_return Bytes(r.p, r.end);
  }


  void deliver(Message&& m) {
    counters_.on_recv(m);
    if (m.is_reply()) {
      auto w = reply_waiters_.find(m.correlation);
      if (w != reply_waiters_.end()) {
        TaskGid gid = w->second;
        reply_waiters_.erase(w);
        TaskRecord* rec = find_task(gid);
        if (rec) {
          rec->reply_slot = std::move(m);
          make_runnable(*rec);
        }
        return;
      }
      reply_buffer_[m.correlation] = std::move(m);
      return;
    }
    auto& h = handlers_[size_t(m.kind)];
    if (!h) raise(Errc::io_error, std::string("no handler for ") + msg_kind_name(m.kind));
    h(std::move(m));
  }

  // --- scheduler ----------------------------------------------------------

  TaskGid add_task(TaskDescriptor d, NodeId join_reply_to, uint32_t join_corr, bool wants_reply) {
    auto rec = std::make_unique<TaskRecord>();
    rec->gid = d.gid;
    rec->fn_id = d.fn_id;
    rec->join_reply_to = join_reply_to;
    rec->join_corr = join_corr;
    rec->wants_join_reply = wants_reply;
    TaskArgs args{std::move(d.args), std::move(d.checkpoint)};
    TaskRecord* raw = rec.get();
    tasks_[d.gid] = std::move(rec);
    pending_bodies_[d.gid] = std::move(args);
    enqueue_runnable(d.gid);
    return raw->gid;
  }

  std::vector<TaskGid> runnable_tasks() const { return runnable_; }
  size_t task_count() const { return tasks_.size(); }
  size_t runnable_count() const { return runnable_.size(); }

  TaskRecord* find_task(TaskGid gid) {
    auto it = tasks_.find(gid);
    return it == tasks_.end() ? nullptr : it->second.get();
  }

  /// Runs one cooperative quantum of `gid`. Returns true if the task
  /// finished during this step.
  bool run_task_step(TaskGid gid) {
    auto it = std::find(runnable_.begin(), runnable_.end(), gid);
    if (it == runnable_.end()) raise(Errc::not_found, "task not runnable");
    runnable_.erase(it);
    TaskRecord& rec = *tasks_.at(gid);
    rec.state = TaskState::Running;
    rec.at_checkpoint = false;
    quantum_++;
    heap_.quantum = quantum_;
    current_ = &rec;
    if (!rec.started) {
      rec.started = true;
      TaskArgs args = std::move(pending_bodies_.at(gid));
      pending_bodies_.erase(gid);
      start_task_body(rec, std::move(args));
    } else {
      auto h = rec.resume_handle;
      rec.resume_handle = nullptr;
      h.resume();
    }
    current_ = nullptr;
    if (rec.done) {
      finalize_task(rec);
      return true;
    }
    return false;
  }

  TaskRecord* current_task() { return current_; }
  TaskGid current_gid() const { return current_ ? current_->gid : 0; }

  void enqueue_runnable(TaskGid gid) {
    auto it = std::lower_bound(runnable_.begin(), runnable_.end(), gid);
    if (it == runnable_.end() || *it != gid) runnable_.insert(it, gid);
  }

  void make_runnable(TaskRecord& rec) {
    rec.state = TaskState::Runnable;
    enqueue_runnable(rec.gid);
  }

  // CacheHost: park the current task on a local event queue.
  Co<Unit> park(WaitQueue& q) override {
    co_await EventAwait{*this, q};
    co_return unit();
  }
  void wake_all(WaitQueue& q) override {
    for (TaskGid gid : q.waiters) {
      TaskRecord* rec = find_task(gid);
      if (rec) make_runnable(*rec);
    }
    q.waiters.clear();
  }

  // --- awaitables ---------------------------------------------------------

  struct YieldAwait {
    NodeRuntime& n;
    bool at_checkpoint = false;
    bool await_ready() noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h) {
      TaskRecord& rec = *n.current_;
      rec.resume_handle = h;
      n.make_runnable(rec);
      rec.at_checkpoint = at_checkpoint;
    }
    void await_resume() noexcept {}
  };

  struct EventAwait {
    NodeRuntime& n;
    WaitQueue& q;
    bool await_ready() noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h) {
      TaskRecord& rec = *n.current_;
      rec.resume_handle = h;
      rec.state = TaskState::ParkedEvent;
      q.waiters.push_back(rec.gid);
    }
    void await_resume() noexcept {}
  };

  struct ReplyAwait {
    NodeRuntime& n;
    uint32_t corr;
    bool await_ready() noexcept { return n.reply_buffer_.count(corr) > 0; }
    void await_suspend(std::coroutine_handle<> h) {
      TaskRecord& rec = *n.current_;
      rec.resume_handle = h;
      rec.state = TaskState::AwaitReply;
      rec.awaited_corr = corr;
      n.reply_waiters_[corr] = rec.gid;
    }
    Message await_resume() {
      auto it = n.reply_buffer_.find(corr);
      if (it != n.reply_buffer_.end()) {
        Message m = std::move(it->second);
        n.reply_buffer_.erase(it);
        return m;
      }
      return std::move(n.current_->reply_slot);
    }
  };

  Co<Message> await_reply(uint32_t corr) {
    Message m = co_await ReplyAwait{*this, corr};
    co_return m;
  }

  Co<Unit> yield_now() {
    co_await YieldAwait{*this, false};
    co_return unit();
  }

  /// Yield that also publishes a migration checkpoint: the handle refs plus a
  /// task-defined state blob a re-spawn can resume from.
  Co<Unit> yield_checkpoint(std::vector<PackedValue> refs, Bytes state) {
    TaskRecord& rec = *current_;
    rec.checkpoint_refs = std::move(refs);
    rec.checkpoint_state = std::move(state);
    co_await YieldAwait{*this, true};
    co_return unit();
  }

  // --- stacks & projections ----------------------------------------------

  uint32_t register_stack_region(TaskGid task, Bytes bytes) {
    uint32_t id = next_stack_++;
    stacks_[id] = StackRegion{task, std::move(bytes)};
    return id;
  }
  StackRegion& stack_region(uint32_t id) {
    auto it = stacks_.find(id);
    if (it == stacks_.end()) raise(Errc::not_found, "stack region " + std::to_string(id));
    return it->second;
  }
  void drop_stack_region(uint32_t id) { stacks_.erase(id); }

  bool claim_overlaps(const ProjectionClaim& c) const {
    for (auto& e : claims_) {
      if (e.stack_origin != c.stack_origin || e.origin != c.origin) continue;
      if (!e.exclusive && !c.exclusive) continue;
      uint64_t lo = std::max(e.offset, c.offset);
      uint64_t hi = std::min(e.offset + e.length, c.offset + c.length);
      if (lo < hi) return true;
    }
    return false;
  }
  void add_claim(const ProjectionClaim& c) { claims_.push_back(c); }
  void drop_claim(const ProjectionClaim& c) {
    for (auto it = claims_.begin(); it != claims_.end(); ++it) {
      if (it->stack_origin == c.stack_origin && it->origin == c.origin && it->offset == c.offset &&
          it->length == c.length && it->exclusive == c.exclusive) {
        claims_.erase(it);
        return;
      }
    }
  }
  void drop_claims_for(uint64_t origin, bool stack_origin) {
    std::erase_if(claims_, [&](const ProjectionClaim& e) {
      return e.origin == origin && e.stack_origin == stack_origin;
    });
  }

  // --- hooks & stats -------------------------------------------------------

  std::function<void(TaskRecord&)> on_task_done;  // controller bookkeeping, join fan-out

  struct Stats {
    uint64_t heap_used = 0;
    uint64_t heap_capacity = 0;
    uint64_t live_records = 0;
    uint64_t cache_entries = 0;
    uint64_t cache_refs = 0;
    uint32_t tasks = 0;
    uint32_t runnable = 0;
  };
  Stats stats() const {
    Stats s;
    s.heap_used = heap_.used_bytes();
    s.heap_capacity = heap_.capacity();
    s.live_records = heap_.live_records();
    s.cache_entries = cache_.size();
    s.cache_refs = cache_.total_count();
    s.tasks = uint32_t(tasks_.size());
    s.runnable = uint32_t(runnable_.size());
    return s;
  }

  const std::map<TaskGid, std::unique_ptr<TaskRecord>>& tasks() const { return tasks_; }

  /// Removes a parked-at-checkpoint task for migration; returns its record.
  std::unique_ptr<TaskRecord> extract_task(TaskGid gid) {
    TaskRecord* rec = find_task(gid);
    if (!rec) raise(Errc::not_found, "task " + std::to_string(gid));
    if (rec->state != TaskState::Runnable || !rec->at_checkpoint)
      raise(Errc::not_at_yield, "task not parked at a checkpointed yield");
    auto it = std::find(runnable_.begin(), runnable_.end(), gid);
    runnable_.erase(it);
    auto out = std::move(tasks_.at(gid));
    tasks_.erase(gid);
    return out;
  }

 private:
  void start_task_body(TaskRecord& rec, TaskArgs args);

  void finalize_task(TaskRecord& rec) {
    TaskGid gid = rec.gid;
    if (rec.root.exception()) {
      rec.failed = true;
      try {
        std::rethrow_exception(rec.root.exception());
      } catch (const Error& e) {
        rec.error = e.what();
        rec.error_code = e.code();
      } catch (const std::exception& e) {
        rec.error = e.what();
        rec.error_code = Errc::io_error;
      }
    } else {
      rec.result = rec.root.take_result();
    }
    if (on_task_done) on_task_done(rec);
    tasks_.erase(gid);
  }

  NodeId id_;
  const ClusterConfig* cfg_;
  Addressing addr_;
  PartitionMap parts_;
  Fabric* fabric_;
  FunctionRegistry* registry_;
  ProtocolObserver* obs_;
  const FaultPlan* faults_;

  HeapPartition heap_;
  CacheMap cache_;
  SlotTable slots_;
  TransportCounters counters_;

  std::array<Handler, kMsgKindCount> handlers_{};
  std::map<uint32_t, TaskGid> reply_waiters_;
  std::map<uint32_t, Message> reply_buffer_;

  std::map<TaskGid, std::unique_ptr<TaskRecord>> tasks_;
  std::map<TaskGid, TaskArgs> pending_bodies_;
  std::vector<TaskGid> runnable_;
  TaskRecord* current_ = nullptr;

  std::map<uint32_t, StackRegion> stacks_;
  std::vector<ProjectionClaim> claims_;
  uint32_t next_stack_ = 1;

  uint64_t quantum_ = 0;
  uint64_t next_uid_ = 1;
  uint64_t next_hid_ = 1;
  uint32_t next_corr_ = 1;

 public:
  uint32_t next_task_seq = 1;
};

class TaskContext {
 public:
  TaskContext(NodeRuntime& node, TaskGid gid) : node_(&node), gid_(gid) {}
  NodeRuntime& node() { return *node_; }
  TaskGid gid() const { return gid_; }
  NodeId node_id() const { return node_->id(); }

  Co<Unit> yield() { return node_->yield_now(); }
  Co<Unit> checkpoint(std::vector<PackedValue> refs, Bytes state) {
    return node_->yield_checkpoint(std::move(refs), std::move(state));
  }

 private:
  NodeRuntime* node_;
  TaskGid gid_;
};

inline void NodeRuntime::start_task_body(TaskRecord& rec, TaskArgs args) {
  const TaskFn& fn = registry_->fn(rec.fn_id);
  auto ctx = std::make_shared<TaskContext>(*this, rec.gid);
  // The context must outlive the coroutine frame; tie it to the wrapper.
  rec.root = [](std::shared_ptr<TaskContext> c, const TaskFn& f, TaskArgs a) -> Co<Bytes> {
    Bytes out = co_await f(*c, std::move(a));
    co_return out;
  }(ctx, fn, std::move(args));
  TaskRecord* rp = &rec;
  rec.root.start_root([rp] { rp->done = true; });
}

}  // namespace odsm
