#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "odsm/addressing.hpp"
#include "odsm/errors.hpp"

namespace odsm {

enum class TransportKind : uint8_t { Loopback, Tcp };

struct ServerEntry {
  uint32_t index = 0;
  std::string host = "127.0.0.1";
  uint16_t data_port = 0;
  uint16_t control_port = 0;
};

/// Cluster-wide configuration. Node 0 hosts the global controller and the
/// program entry point.
struct ClusterConfig {
  std::vector<ServerEntry> servers;
  uint64_t unit_heap_size = 1ull << 20;  // bytes per partition
  uint32_t color_bits = 16;
  TransportKind transport = TransportKind::Loopback;
  uint32_t scheduler_quantum = 1;     // ops per task step
  uint32_t heartbeat_quanta = 10;     // 0 disables heartbeats
  uint32_t cpu_slots = 4;             // runnable tasks a node absorbs before "congested"
  double cache_sweep_ratio = 0.85;    // evict unreferenced copies above this heap usage
  double rebalance_ratio = 0.90;      // controller migration thresholds (memory and cpu)

  uint32_t node_count() const { return uint32_t(servers.size()); }
  Addressing addressing() const { return Addressing{color_bits}; }
  PartitionMap partition_map() const { return PartitionMap{node_count(), unit_heap_size}; }

  void validate() const {
    if (servers.empty()) raise(Errc::config_error, "no servers configured");
    for (size_t i = 0; i < servers.size(); i++)
      if (servers[i].index != i)
        raise(Errc::config_error, "server indices must be dense from 0 (got " +
                                      std::to_string(servers[i].index) + " at position " +
                                      std::to_string(i) + ")");
    if (color_bits < 1 || color_bits > 32) raise(Errc::config_error, "color_bits must be in [1,32]");
    Addressing a{color_bits};
    if (double(node_count()) * double(unit_heap_size) > double(a.base_mask()))
      raise(Errc::config_error, "partitions exceed base address space for this color width");
  }

  static ClusterConfig loopback(uint32_t nodes, uint64_t unit = 1ull << 20, uint32_t colors = 16) {
    ClusterConfig cfg;
    for (uint32_t i = 0; i < nodes; i++) cfg.servers.push_back({i, "local", 0, 0});
    cfg.unit_heap_size = unit;
    cfg.color_bits = colors;
    cfg.transport = TransportKind::Loopback;
    cfg.validate();
    return cfg;
  }
};

/// Parses the line-oriented config: `key = value` entries plus a servers
/// block where each line reads `index host data_port control_port`.
/// Environment variables ODSM_COLOR_BITS and ODSM_TRANSPORT override the file.
inline ClusterConfig parse_config(std::istream& in) {
  ClusterConfig cfg;
  std::string line;
  bool in_servers = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (first == "servers") {
      in_servers = true;
      continue;
    }
    if (in_servers && (std::isdigit(first[0]) != 0)) {
      ServerEntry s;
      s.index = uint32_t(std::stoul(first));
      if (!(ls >> s.host >> s.data_port >> s.control_port))
        raise(Errc::config_error, "bad server line " + std::to_string(lineno));
      cfg.servers.push_back(s);
      continue;
    }
    in_servers = false;
    std::string eq, value;
    if (!(ls >> eq >> value) || eq != "=")
      raise(Errc::config_error, "expected 'key = value' at line " + std::to_string(lineno));
    if (first == "unit_heap_size") cfg.unit_heap_size = std::stoull(value);
    else if (first == "color_bits") cfg.color_bits = uint32_t(std::stoul(value));
    else if (first == "scheduler_quantum") cfg.scheduler_quantum = uint32_t(std::stoul(value));
    else if (first == "heartbeat_quanta") cfg.heartbeat_quanta = uint32_t(std::stoul(value));
    else if (first == "cpu_slots") cfg.cpu_slots = uint32_t(std::stoul(value));
    else if (first == "transport") {
      if (value == "loopback") cfg.transport = TransportKind::Loopback;
      else if (value == "tcp") cfg.transport = TransportKind::Tcp;
      else raise(Errc::config_error, "transport must be loopback or tcp");
    } else {
      raise(Errc::config_error, "unknown key '" + first + "' at line " + std::to_string(lineno));
    }
  }
  if (const char* cb = std::getenv("ODSM_COLOR_BITS")) cfg.color_bits = uint32_t(std::stoul(cb));
  if (const char* tr = std::getenv("ODSM_TRANSPORT")) {
    std::string v = tr;
    if (v == "loopback") cfg.transport = TransportKind::Loopback;
    else if (v == "tcp") cfg.transport = TransportKind::Tcp;
    else raise(Errc::config_error, "ODSM_TRANSPORT must be loopback or tcp");
  }
  cfg.validate();
  return cfg;
}

inline ClusterConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) raise(Errc::config_error, "cannot open config file " + path);
  return parse_config(f);
}

}  // namespace odsm
