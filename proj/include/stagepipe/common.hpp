#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace stagepipe {

using Json = nlohmann::json;

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;

inline int64_t to_micros(TimePoint tp) {
  return std::chrono::duration_cast<std::chrono::microseconds>(tp.time_since_epoch()).count();
}

inline int64_t wall_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class Errc {
  // pipeline
  CycleDetected,
  UnknownOperator,
  DanglingEdge,
  InvalidConfig,
  DeadlineExceeded,
  StageFailure,
  NoTenants,
  PipelineUnavailable,
  // cube store
  DimensionMismatch,
  EmptyInput,
  CorruptBlock,
  StaleGeneration,
  VerificationFailed,
  GenerationMismatch,
  // scorer
  UnknownGroup,
  // tuner / shedder
  InsufficientData,
  NoFeasiblePointFound,
  AllFinalistsRegressed,
  HarnessFailure,
  // workload
  Unachievable,
  // service
  BindFailure,
  ModelLoadFailure,
  IoError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::CycleDetected: return "CycleDetected";
    case Errc::UnknownOperator: return "UnknownOperator";
    case Errc::DanglingEdge: return "DanglingEdge";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::DeadlineExceeded: return "DeadlineExceeded";
    case Errc::StageFailure: return "StageFailure";
    case Errc::NoTenants: return "NoTenants";
    case Errc::PipelineUnavailable: return "PipelineUnavailable";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::CorruptBlock: return "CorruptBlock";
    case Errc::StaleGeneration: return "StaleGeneration";
    case Errc::VerificationFailed: return "VerificationFailed";
    case Errc::GenerationMismatch: return "GenerationMismatch";
    case Errc::UnknownGroup: return "UnknownGroup";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::NoFeasiblePointFound: return "NoFeasiblePointFound";
    case Errc::AllFinalistsRegressed: return "AllFinalistsRegressed";
    case Errc::HarnessFailure: return "HarnessFailure";
    case Errc::Unachievable: return "Unachievable";
    case Errc::BindFailure: return "BindFailure";
    case Errc::ModelLoadFailure: return "ModelLoadFailure";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline constexpr uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

// FNV-1a over raw bytes.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = kFnvOffsetBasis;
  for (unsigned char b : bytes) {
    h ^= static_cast<uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(const void* data, size_t len) {
  return fnv1a64(std::string_view(static_cast<const char*>(data), len));
}

// Finalizer-style mixer, used where an integer needs to be spread uniformly
// (tenant dispatch, synthetic data derivation).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Fixed-bucket latency histogram; thread-safe. Bucket i covers
// [bound[i-1], bound[i]) microseconds, geometric bounds.
class LatencyHistogram {
 public:
  LatencyHistogram() {
    double b = 1.0;
    for (size_t i = 0; i < kBuckets; ++i) {
      bounds_[i] = b;
      b *= 1.35;
    }
  }

  void record(double micros) {
    size_t i = 0;
    while (i + 1 < kBuckets && micros >= bounds_[i]) ++i;
    counts_[i].fetch_add(1, std::memory_order_relaxed);
    count_.fetch_add(1, std::memory_order_relaxed);
    auto ticks = static_cast<uint64_t>(micros * 1000.0);
    sum_ns_.fetch_add(ticks, std::memory_order_relaxed);
  }

  uint64_t count() const { return count_.load(std::memory_order_relaxed); }

  double mean_micros() const {
    uint64_t n = count();
    return n == 0 ? 0.0 : static_cast<double>(sum_ns_.load()) / 1000.0 / static_cast<double>(n);
  }

  // Quantile from bucket boundaries (upper bound of the containing bucket).
  double quantile_micros(double q) const {
    uint64_t n = count();
    if (n == 0) return 0.0;
    uint64_t target = static_cast<uint64_t>(q * static_cast<double>(n));
    uint64_t seen = 0;
    for (size_t i = 0; i < kBuckets; ++i) {
      seen += counts_[i].load(std::memory_order_relaxed);
      if (seen > target) return bounds_[i];
    }
    return bounds_[kBuckets - 1];
  }

 private:
  static constexpr size_t kBuckets = 64;
  double bounds_[kBuckets];
  std::atomic<uint64_t> counts_[kBuckets] = {};
  std::atomic<uint64_t> count_{0};
  std::atomic<uint64_t> sum_ns_{0};
};

// Monotone counters plus per-stage histograms, rendered as plain text for the
// metrics endpoint. Counter values never decrease within a process lifetime.
class Metrics {
 public:
  void add(const std::string& name, uint64_t delta = 1) {
    std::lock_guard<std::mutex> lk(mu_);
    counters_[name] += delta;
  }

  void add_cpu_ns(const std::string& stage, uint64_t ns) {
    std::lock_guard<std::mutex> lk(mu_);
    cpu_ns_[stage] += ns;
  }

  void set_gauge(const std::string& name, double v) {
    std::lock_guard<std::mutex> lk(mu_);
    gauges_[name] = v;
  }

  LatencyHistogram& histogram(const std::string& name) {
    std::lock_guard<std::mutex> lk(mu_);
    return histograms_[name];
  }

  uint64_t counter(const std::string& name) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = counters_.find(name);
    return it == counters_.end() ? 0 : it->second;
  }

  double cpu_seconds(const std::string& stage) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = cpu_ns_.find(stage);
    return it == cpu_ns_.end() ? 0.0 : static_cast<double>(it->second) * 1e-9;
  }

  double total_cpu_seconds() const {
    std::lock_guard<std::mutex> lk(mu_);
    uint64_t total = 0;
    for (auto& [k, v] : cpu_ns_) total += v;
    return static_cast<double>(total) * 1e-9;
  }

  std::string render_text() const {
    std::lock_guard<std::mutex> lk(mu_);
    std::ostringstream os;
    for (auto& [name, v] : counters_) os << name << " " << v << "\n";
    for (auto& [name, v] : gauges_) os << name << " " << v << "\n";
    for (auto& [stage, ns] : cpu_ns_)
      os << "cpu_seconds{stage=\"" << stage << "\"} " << static_cast<double>(ns) * 1e-9 << "\n";
    for (auto& [name, h] : histograms_) {
      os << name << "_count " << h.count() << "\n";
      os << name << "_mean_us " << h.mean_micros() << "\n";
      os << name << "_p50_us " << h.quantile_micros(0.50) << "\n";
      os << name << "_p95_us " << h.quantile_micros(0.95) << "\n";
      os << name << "_p99_us " << h.quantile_micros(0.99) << "\n";
    }
    return os.str();
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, uint64_t> counters_;
  std::map<std::string, double> gauges_;
  std::map<std::string, uint64_t> cpu_ns_;
  std::map<std::string, LatencyHistogram> histograms_;
};

// Thread CPU time, for per-stage resource accounting.
inline uint64_t thread_cpu_ns() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<uint64_t>(ts.tv_sec) * 1000000000ull + static_cast<uint64_t>(ts.tv_nsec);
}

}  // namespace stagepipe
