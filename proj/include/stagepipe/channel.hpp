#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>
#include <vector>

#include "stagepipe/common.hpp"

namespace stagepipe {

// Bounded FIFO queue shared by all inbound edges of a stage processor.
// Many producers, many consumers. A full channel blocks producers
// (backpressure); events are never dropped by the channel itself.
template <typename T>
class BoundedChannel {
 public:
  explicit BoundedChannel(size_t capacity) : capacity_(capacity) {}

  size_t capacity() const { return capacity_; }

  size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return items_.size();
  }

  bool closed() const {
    std::lock_guard<std::mutex> lk(mu_);
    return closed_;
  }

  // Blocks while full. Returns false if the channel was closed.
  bool push(T item) {
    std::unique_lock<std::mutex> lk(mu_);
    not_full_.wait(lk, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    lk.unlock();
    not_empty_.notify_one();
    return true;
  }

  // Pops up to max_items. Blocks until at least one item is available or the
  // channel is closed; never waits to fill a batch. An empty result means
  // closed-and-drained.
  std::vector<T> pop_batch(size_t max_items) {
    std::unique_lock<std::mutex> lk(mu_);
    not_empty_.wait(lk, [&] { return closed_ || !items_.empty(); });
    std::vector<T> out;
    size_t n = std::min(max_items, items_.size());
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      out.push_back(std::move(items_.front()));
      items_.pop_front();
    }
    lk.unlock();
    if (n > 0) not_full_.notify_all();
    return out;
  }

  // Like pop_batch but also wakes up after timeout with whatever is queued
  // (possibly nothing). Used by stages that must run periodic housekeeping.
  std::vector<T> pop_batch_for(size_t max_items, std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    not_empty_.wait_for(lk, timeout, [&] { return closed_ || !items_.empty(); });
    std::vector<T> out;
    size_t n = std::min(max_items, items_.size());
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      out.push_back(std::move(items_.front()));
      items_.pop_front();
    }
    lk.unlock();
    if (n > 0) not_full_.notify_all();
    return out;
  }

  // Unblocks producers and consumers. Queued items remain poppable.
  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
    }
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  const size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

}  // namespace stagepipe
