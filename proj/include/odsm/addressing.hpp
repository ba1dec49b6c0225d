#pragma once

#include <cstdint>
#include <string>

#include "odsm/errors.hpp"

namespace odsm {

using NodeId = uint16_t;

constexpr uint64_t kNullAddress = 0;
constexpr uint64_t kUBit = 1ull << 63;
constexpr uint64_t kExtPayloadMask = kUBit - 1;

/// Global-address encoding: the top `color_bits` bits of a 64-bit address
/// carry a version counter ("color"), the rest is the base offset into the
/// partitioned global heap. The color width is a single configuration point
/// so that overflow behaviour is testable with small counters.
struct Addressing {
  uint32_t color_bits = 16;

  uint32_t base_bits() const { return 64 - color_bits; }
  uint64_t base_mask() const { return (1ull << base_bits()) - 1; }
  uint64_t max_color() const { return (1ull << color_bits) - 1; }

  uint64_t get_color(uint64_t g) const { return g >> base_bits(); }
  uint64_t clear_color(uint64_t g) const { return g & base_mask(); }

  uint64_t append_color(uint64_t g, uint64_t c) const {
    if (c > max_color())
      raise(Errc::color_overflow, "color " + std::to_string(c) + " needs more than " +
                                      std::to_string(color_bits) + " bits");
    return clear_color(g) | (c << base_bits());
  }
};

// The extension word's U flag lives in bit 63 regardless of color width.
inline bool color_updated(uint64_t ext) { return (ext >> 63) & 1; }
inline uint64_t clear_u_bit(uint64_t ext) { return ext & kExtPayloadMask; }
inline uint64_t set_u_bit(uint64_t ext) { return ext | kUBit; }

/// Static split of the base-offset space into one contiguous range per node.
struct PartitionMap {
  uint32_t node_count = 1;
  uint64_t unit_size = 1ull << 20;

  uint64_t lo(NodeId node) const { return uint64_t(node) * unit_size; }
  uint64_t hi(NodeId node) const { return (uint64_t(node) + 1) * unit_size; }

  bool in_range(uint64_t base) const { return base != 0 && base < uint64_t(node_count) * unit_size; }

  NodeId node_of_base(uint64_t base) const {
    if (base == kNullAddress) raise(Errc::null_address, "node_of on null address");
    if (!in_range(base))
      raise(Errc::out_of_range, "base 0x" + to_hex(base) + " outside mapped partitions");
    return NodeId(base / unit_size);
  }

  static std::string to_hex(uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%llx", (unsigned long long)v);
    return buf;
  }
};

inline NodeId node_of(const Addressing& addr, const PartitionMap& pm, uint64_t g) {
  return pm.node_of_base(addr.clear_color(g));
}

inline bool is_local(const Addressing& addr, const PartitionMap& pm, uint64_t g, NodeId self) {
  if (g == kNullAddress) raise(Errc::null_address, "is_local on null address");
  return node_of(addr, pm, g) == self;
}

/// Debug rendering as "color:node:offset".
inline std::string format_address(const Addressing& addr, const PartitionMap& pm, uint64_t g) {
  if (g == kNullAddress) return "null";
  uint64_t base = addr.clear_color(g);
  std::string node = pm.in_range(base) ? std::to_string(pm.node_of_base(base)) : "?";
  uint64_t off = pm.in_range(base) ? base % pm.unit_size : base;
  return std::to_string(addr.get_color(g)) + ":" + node + ":0x" + PartitionMap::to_hex(off);
}

}  // namespace odsm
