#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "odsm/addressing.hpp"
#include "odsm/errors.hpp"

namespace odsm {

using Bytes = std::vector<uint8_t>;

enum class MsgKind : uint16_t {
  FetchCopy = 0,
  MoveFetch,
  DeallocRequest,
  OwnerWriteBack,
  InvalidateNotice,
  AllocRequest,
  AtomicOp,
  MutexOp,
  ChannelData,
  SpawnTask,
  MigrateTask,
  ControllerQuery,
  ControllerReply,
  Heartbeat,
  kCount_,
};
constexpr size_t kMsgKindCount = size_t(MsgKind::kCount_);

inline const char* msg_kind_name(MsgKind k) {
  static const char* names[] = {"FetchCopy",    "MoveFetch",  "DeallocRequest", "OwnerWriteBack",
                                "InvalidateNotice", "AllocRequest", "AtomicOp",   "MutexOp",
                                "ChannelData",  "SpawnTask",  "MigrateTask",    "ControllerQuery",
                                "ControllerReply", "Heartbeat"};
  return size_t(k) < kMsgKindCount ? names[size_t(k)] : "?";
}

constexpr uint16_t kFlagReply = 0x1;
constexpr uint16_t kFlagOneWay = 0x2;

struct Message {
  MsgKind kind{};
  NodeId src{};
  NodeId dst{};
  uint16_t flags{};
  uint32_t correlation{};
  Bytes payload;

  bool is_reply() const { return flags & kFlagReply; }
  bool is_one_way() const { return flags & kFlagOneWay; }
};

// ---------------------------------------------------------------------------
// Wire framing (normative for the TCP backend):
// 16-byte little-endian header  kind:2 src:2 dst:2 flags:2 correlation:4 length:4
// followed by `length` payload bytes.
// ---------------------------------------------------------------------------

constexpr size_t kFrameHeaderSize = 16;

inline void put_le16(Bytes& b, uint16_t v) {
  b.push_back(uint8_t(v));
  b.push_back(uint8_t(v >> 8));
}
inline void put_le32(Bytes& b, uint32_t v) {
  for (int i = 0; i < 4; i++) b.push_back(uint8_t(v >> (8 * i)));
}
inline void put_le64(Bytes& b, uint64_t v) {
  for (int i = 0; i < 8; i++) b.push_back(uint8_t(v >> (8 * i)));
}

inline Bytes encode_frame(const Message& m) {
  Bytes out;
  out.reserve(kFrameHeaderSize + m.payload.size());
  put_le16(out, uint16_t(m.kind));
  put_le16(out, m.src);
  put_le16(out, m.dst);
  put_le16(out, m.flags);
  put_le32(out, m.correlation);
  put_le32(out, uint32_t(m.payload.size()));
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

inline uint16_t get_le16(const uint8_t* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }
inline uint32_t get_le32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; i--) v = (v << 8) | p[i];
  return v;
}
inline uint64_t get_le64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = (v << 8) | p[i];
  return v;
}

/// Decodes one frame from a buffer. Returns bytes consumed, 0 if incomplete.
inline size_t decode_frame(const uint8_t* data, size_t len, Message& out) {
  if (len < kFrameHeaderSize) return 0;
  uint32_t plen = get_le32(data + 12);
  if (len < kFrameHeaderSize + plen) return 0;
  out.kind = MsgKind(get_le16(data));
  out.src = get_le16(data + 2);
  out.dst = get_le16(data + 4);
  out.flags = get_le16(data + 6);
  out.correlation = get_le32(data + 8);
  out.payload.assign(data + kFrameHeaderSize, data + kFrameHeaderSize + plen);
  return kFrameHeaderSize + plen;
}

// ---------------------------------------------------------------------------
// Payload cursor helpers. Every payload struct in the protocol encodes through
// these so the loopback and TCP backends carry identical bytes.
// ---------------------------------------------------------------------------

struct Writer {
  Bytes out;
  void u8(uint8_t v) { out.push_back(v); }
  void u16(uint16_t v) { put_le16(out, v); }
  void u32(uint32_t v) { put_le32(out, v); }
  void u64(uint64_t v) { put_le64(out, v); }
  void bytes(const Bytes& b) {
    u32(uint32_t(b.size()));
    out.insert(out.end(), b.begin(), b.end());
  }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
};

struct Reader {
  const uint8_t* p;
  const uint8_t* end;
  explicit Reader(const Bytes& b) : p(b.data()), end(b.data() + b.size()) {}
  void need(size_t n) const {
    if (size_t(end - p) < n) raise(Errc::io_error, "truncated payload");
  }
  uint8_t u8() {
    need(1);
    return *p++;
  }
  uint16_t u16() {
    need(2);
    auto v = get_le16(p);
    p += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    auto v = get_le32(p);
    p += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    auto v = get_le64(p);
    p += 8;
    return v;
  }
  Bytes bytes() {
    uint32_t n = u32();
    need(n);
    Bytes b(p, p + n);
    p += n;
    return b;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(p, p + n);
    p += n;
    return s;
  }
  bool at_end() const { return p == end; }
};

// ---------------------------------------------------------------------------
// Per-node transport counters. Monotone; benches and acceptance checks read
// message economy exclusively from these.
// ---------------------------------------------------------------------------

struct TransportCounters {
  std::array<uint64_t, kMsgKindCount> sent_req{};
  std::array<uint64_t, kMsgKindCount> sent_rep{};
  std::array<uint64_t, kMsgKindCount> recv_req{};
  std::array<uint64_t, kMsgKindCount> recv_rep{};
  std::map<NodeId, uint64_t> bytes_to;  // per-pair payload byte totals

  void on_send(const Message& m) {
    (m.is_reply() ? sent_rep : sent_req)[size_t(m.kind)]++;
    bytes_to[m.dst] += m.payload.size() + kFrameHeaderSize;
  }
  void on_recv(const Message& m) { (m.is_reply() ? recv_rep : recv_req)[size_t(m.kind)]++; }

  uint64_t requests(MsgKind k) const { return sent_req[size_t(k)]; }
  uint64_t total_sent() const {
    uint64_t t = 0;
    for (size_t i = 0; i < kMsgKindCount; i++) t += sent_req[i] + sent_rep[i];
    return t;
  }

  TransportCounters& operator+=(const TransportCounters& o) {
    for (size_t i = 0; i < kMsgKindCount; i++) {
      sent_req[i] += o.sent_req[i];
      sent_rep[i] += o.sent_rep[i];
      recv_req[i] += o.recv_req[i];
      recv_rep[i] += o.recv_rep[i];
    }
    for (auto& [n, b] : o.bytes_to) bytes_to[n] += b;
    return *this;
  }
};

/// sent_req deltas per kind between two snapshots; the message-economy checks
/// compare these against exact expected vectors.
inline std::array<uint64_t, kMsgKindCount> request_delta(const TransportCounters& before,
                                                         const TransportCounters& after) {
  std::array<uint64_t, kMsgKindCount> d{};
  for (size_t i = 0; i < kMsgKindCount; i++) d[i] = after.sent_req[i] - before.sent_req[i];
  return d;
}

}  // namespace odsm
