#pragma once

#include <any>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "stagepipe/common.hpp"

namespace stagepipe {

// Per-stage (enqueue, start, end) triple recorded while an event moves
// through the pipeline. Consumed by the offline tuner and returned on the
// response trace.
struct StageTiming {
  std::string stage;
  TimePoint enqueue{};
  TimePoint start{};
  TimePoint end{};

  double queue_wait_us() const {
    return std::chrono::duration<double, std::micro>(start - enqueue).count();
  }
  double service_us() const {
    return std::chrono::duration<double, std::micro>(end - start).count();
  }
  double total_us() const {
    return std::chrono::duration<double, std::micro>(end - enqueue).count();
  }
};

// The unit of work flowing between stage processors. fragment_index /
// fragment_total drive join bookkeeping: a join fires once all
// fragment_total fragments of a request_id have arrived.
struct Event {
  uint64_t request_id = 0;
  std::string tenant;
  std::any payload;
  uint32_t fragment_index = 0;
  uint32_t fragment_total = 1;
  TimePoint deadline = TimePoint::max();
  TimePoint enqueue_time{};
  std::vector<StageTiming> trace;

  bool expired(TimePoint now) const { return now >= deadline; }
};

}  // namespace stagepipe
