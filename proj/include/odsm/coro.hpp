#pragma once

#include <coroutine>
#include <exception>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace odsm {

/// Lazy coroutine used for node-local tasks and for protocol operations that
/// may suspend on a transport round trip. Nested awaits chain through
/// symmetric transfer, so resuming the innermost suspended frame continues
/// the whole logical call stack.
template <typename T>
class [[nodiscard]] Co {
 public:
  struct promise_type;
  using Handle = std::coroutine_handle<promise_type>;

  struct FinalAwaiter {
    bool await_ready() noexcept { return false; }
    std::coroutine_handle<> await_suspend(Handle h) noexcept {
      auto& p = h.promise();
      if (p.continuation) return p.continuation;
      if (p.on_root_done) p.on_root_done();
      return std::noop_coroutine();
    }
    void await_resume() noexcept {}
  };

  struct promise_type {
    std::coroutine_handle<> continuation{};
    std::function<void()> on_root_done{};
    std::optional<T> value{};
    std::exception_ptr exc{};

    Co get_return_object() { return Co(Handle::from_promise(*this)); }
    std::suspend_always initial_suspend() noexcept { return {}; }
    FinalAwaiter final_suspend() noexcept { return {}; }
    void return_value(T v) { value.emplace(std::move(v)); }
    void unhandled_exception() { exc = std::current_exception(); }
  };

  Co() = default;
  explicit Co(Handle h) : h_(h) {}
  Co(Co&& o) noexcept : h_(std::exchange(o.h_, nullptr)) {}
  Co& operator=(Co&& o) noexcept {
    if (this != &o) {
      destroy();
      h_ = std::exchange(o.h_, nullptr);
    }
    return *this;
  }
  Co(const Co&) = delete;
  Co& operator=(const Co&) = delete;
  ~Co() { destroy(); }

  bool valid() const { return h_ != nullptr; }
  bool done() const { return h_ && h_.done(); }

  // Awaiting a Co starts it and transfers control into its frame.
  auto operator co_await() && noexcept {
    struct Awaiter {
      Handle h;
      bool await_ready() noexcept { return false; }
      std::coroutine_handle<> await_suspend(std::coroutine_handle<> awaiting) noexcept {
        h.promise().continuation = awaiting;
        return h;
      }
      T await_resume() {
        auto& p = h.promise();
        if (p.exc) std::rethrow_exception(p.exc);
        return std::move(*p.value);
      }
    };
    return Awaiter{h_};
  }

  /// Kick off a root task. `on_done` fires from final_suspend when the
  /// coroutine completes (normally or by exception).
  void start_root(std::function<void()> on_done) {
    h_.promise().on_root_done = std::move(on_done);
    h_.resume();
  }

  /// Harvest the result of a completed root.
  T take_result() {
    auto& p = h_.promise();
    if (p.exc) std::rethrow_exception(p.exc);
    return std::move(*p.value);
  }
  std::exception_ptr exception() const { return h_.promise().exc; }

 private:
  void destroy() {
    if (h_) {
      h_.destroy();
      h_ = nullptr;
    }
  }
  Handle h_{};
};

// Co requires a value type; operations with no result return Unit.
struct Unit {};
using CoVoid = Co<Unit>;
inline Unit unit() { return {}; }

/// Runs a Co<T> that never truly suspends (all awaits resolve inline).
/// Used by unit tests that drive protocol pieces without a cluster.
template <typename T>
T run_sync(Co<T> co) {
  bool done = false;
  co.start_root([&] { done = true; });
  if (!done) throw std::logic_error("run_sync: coroutine suspended");
  return co.take_result();
}

/// FIFO of parked task ids waiting on a node-local event.
struct WaitQueue {
  std::vector<uint64_t> waiters;
  bool empty() const { return waiters.empty(); }
};

}  // namespace odsm
