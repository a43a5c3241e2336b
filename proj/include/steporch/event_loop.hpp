#pragma once

// Single-threaded scheduler on a virtual clock. Tasks run in (time, posting
// order) order; the clock only moves forward.

#include <cstdint>
#include <functional>
#include <queue>
#include <string>
#include <vector>

#include "steporch/errors.hpp"

namespace steporch {

class EventLoop {
 public:
  using Task = std::function<void()>;

  std::int64_t now() const noexcept { return now_ms_; }
  bool empty() const noexcept { return queue_.empty(); }
  std::size_t pending() const noexcept { return queue_.size(); }
  std::int64_t next_time() const { return queue_.top().at_ms; }

  void post(std::int64_t at_ms, Task task) {
    if (at_ms < now_ms_) {
      throw InvariantViolation("event loop: task at " + std::to_string(at_ms) +
                               " ms is before now (" + std::to_string(now_ms_) + " ms)");
    }
    queue_.push({at_ms, next_seq_++, std::move(task)});
  }

  // Runs every task due at or before `t`, then sets the clock to `t`.
  void run_until(std::int64_t t) {
    while (!queue_.empty() && queue_.top().at_ms <= t) step();
    if (t > now_ms_) now_ms_ = t;
  }

  // Runs until the queue is empty or the next task lies beyond `horizon_ms`.
  void run_all(std::int64_t horizon_ms = INT64_MAX) {
    while (!queue_.empty() && queue_.top().at_ms <= horizon_ms) step();
  }

 private:
  struct Entry {
    std::int64_t at_ms;
    std::uint64_t seq;
    Task task;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      return a.at_ms != b.at_ms ? a.at_ms > b.at_ms : a.seq > b.seq;
    }
  };

  void step() {
    Entry e = queue_.top();
    queue_.pop();
    now_ms_ = e.at_ms;
    e.task();
  }

  std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
  std::int64_t now_ms_ = 0;
  std::uint64_t next_seq_ = 0;
};

}  // namespace steporch
