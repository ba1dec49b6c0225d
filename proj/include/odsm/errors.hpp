#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace odsm {

enum class Errc : uint8_t {
  ok = 0,
  null_address,
  out_of_range,
  color_overflow,
  out_of_memory,
  cluster_exhausted,
  double_free,
  unknown_base,
  dead_object,
  bad_bounds,
  release_without_acquire,
  swmr_violation,
  live_handle_violation,
  not_found,
  fetch_failed,
  closed_channel,
  counter_underflow,
  not_holder,
  unknown_function,
  unknown_node,
  not_at_yield,
  already_dropped,
  overlapping_projection,
  remote_tied_access,
  config_error,
  io_error,
  deadlock,
  bound_exceeded,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ok: return "ok";
    case Errc::null_address: return "null_address";
    case Errc::out_of_range: return "out_of_range";
    case Errc::color_overflow: return "color_overflow";
    case Errc::out_of_memory: return "out_of_memory";
    case Errc::cluster_exhausted: return "cluster_exhausted";
    case Errc::double_free: return "double_free";
    case Errc::unknown_base: return "unknown_base";
    case Errc::dead_object: return "dead_object";
    case Errc::bad_bounds: return "bad_bounds";
    case Errc::release_without_acquire: return "release_without_acquire";
    case Errc::swmr_violation: return "swmr_violation";
    case Errc::live_handle_violation: return "live_handle_violation";
    case Errc::not_found: return "not_found";
    case Errc::fetch_failed: return "fetch_failed";
    case Errc::closed_channel: return "closed_channel";
    case Errc::counter_underflow: return "counter_underflow";
    case Errc::not_holder: return "not_holder";
    case Errc::unknown_function: return "unknown_function";
    case Errc::unknown_node: return "unknown_node";
    case Errc::not_at_yield: return "not_at_yield";
    case Errc::already_dropped: return "already_dropped";
    case Errc::overlapping_projection: return "overlapping_projection";
    case Errc::remote_tied_access: return "remote_tied_access";
    case Errc::config_error: return "config_error";
    case Errc::io_error: return "io_error";
    case Errc::deadlock: return "deadlock";
    case Errc::bound_exceeded: return "bound_exceeded";
  }
  return "?";
}

/// Library-wide exception. Carries a code so tests and the verifier can
/// classify failures without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + std::move(what)),
        code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, std::string what) { throw Error(code, std::move(what)); }

}  // namespace odsm
