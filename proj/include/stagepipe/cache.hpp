#pragma once

#include <atomic>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stagepipe/common.hpp"
#include "stagepipe/cube.hpp"

namespace stagepipe {

// ---------------------------------------------------------------------------
// LFU primitive
// ---------------------------------------------------------------------------

// Least-frequently-used map with deterministic eviction: minimal frequency,
// ties broken by least-recent insertion. Frequencies age by halving every
// aging_interval accesses (0 disables aging) so the hot set can drift.
// Not internally synchronized; compose under the owner's lock.
template <typename K, typename V>
class LfuCache {
 public:
  explicit LfuCache(size_t capacity, uint64_t aging_interval = 0)
      : capacity_(capacity), aging_interval_(aging_interval) {}

  size_t capacity() const { return capacity_; }
  size_t size() const { return entries_.size(); }

  bool contains(const K& key) const { return entries_.count(key) > 0; }

  uint64_t frequency(const K& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.freq;
  }

  V* get(const K& key) {
    on_access();
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    bump(it->second, it->first);
    return &it->second.value;
  }

  const V* peek(const K& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second.value;
  }

  // Inserts (freq 1) or overwrites (freq + 1). Returns the evicted key, if
  // insertion pushed something out.
  std::optional<K> put(const K& key, V value) { return put_with_freq(key, std::move(value), 1); }

  // Insertion carrying an externally tracked frequency (level promotion).
  std::optional<K> put_with_freq(const K& key, V value, uint64_t freq) {
    on_access();
    if (capacity_ == 0) return std::nullopt;
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      it->second.value = std::move(value);
      bump(it->second, it->first);
      return std::nullopt;
    }
    std::optional<K> evicted;
    if (entries_.size() >= capacity_) {
      auto victim = order_.begin();  // minimal (freq, insertion seq)
      evicted = std::get<2>(*victim);
      entries_.erase(std::get<2>(*victim));
      order_.erase(victim);
    }
    Entry e;
    e.value = std::move(value);
    e.freq = freq;
    e.seq = next_seq_++;
    order_.emplace(e.freq, e.seq, key);
    entries_.emplace(key, std::move(e));
    return evicted;
  }

  void erase(const K& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    order_.erase({it->second.freq, it->second.seq, it->first});
    entries_.erase(it);
  }

  uint64_t min_frequency() const {
    return order_.empty() ? 0 : std::get<0>(*order_.begin());
  }

  std::vector<K> keys() const {
    std::vector<K> out;
    out.reserve(entries_.size());
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

 private:
  struct Entry {
    V value;
    uint64_t freq = 0;
    uint64_t seq = 0;
  };

  void bump(Entry& e, const K& key) {
    order_.erase({e.freq, e.seq, key});
    ++e.freq;
    order_.emplace(e.freq, e.seq, key);
  }

  void on_access() {
    if (aging_interval_ == 0) return;
    if (++accesses_ < aging_interval_) return;
    accesses_ = 0;
    decltype(order_) rebuilt;
    for (auto& [k, e] : entries_) {
      e.freq /= 2;
      rebuilt.emplace(e.freq, e.seq, k);
    }
    order_ = std::move(rebuilt);
  }

  size_t capacity_;
  uint64_t aging_interval_;
  uint64_t next_seq_ = 0;
  uint64_t accesses_ = 0;
  std::unordered_map<K, Entry> entries_;
  std::set<std::tuple<uint64_t, uint64_t, K>> order_;
};

// ---------------------------------------------------------------------------
// Two-level cube cache
// ---------------------------------------------------------------------------

struct CubeCacheStats {
  uint64_t memory_hits = 0;
  uint64_t disk_hits = 0;
  uint64_t backing_reads = 0;  // served by the cube (then cached)
  uint64_t not_found = 0;      // absent everywhere

  uint64_t lookups() const { return memory_hits + disk_hits + backing_reads + not_found; }
  double hit_ratio() const {
    uint64_t n = lookups();
    return n == 0 ? 0.0 : static_cast<double>(memory_hits + disk_hits) / static_cast<double>(n);
  }
};

struct CubeCacheConfig {
  size_t memory_capacity = 0;
  size_t disk_capacity = 0;
  uint64_t aging_interval = 0;  // 0: derive as 10x disk capacity
  fs::path cache_file;           // backing file for the disk level
};

// Memory level holds hot SparseParameters outright; disk level holds offsets
// into a local fixed-record cache file. A key is promoted into the memory
// overlay once its frequency qualifies (memory not full, or frequency above
// the memory level's current minimum). The memory level is a subset of the
// disk level.
class CubeCache {
 public:
  CubeCache(const CubeCacheConfig& cfg, uint32_t embedding_dim, int64_t generation)
      : generation_(generation),
        value_bytes_(cube_value_bytes(embedding_dim)),
        embedding_dim_(embedding_dim),
        memory_(cfg.memory_capacity,
                cfg.aging_interval ? cfg.aging_interval : 10 * cfg.memory_capacity),
        disk_(cfg.disk_capacity, cfg.aging_interval ? cfg.aging_interval : 10 * cfg.disk_capacity) {
    fs::path file = cfg.cache_file;
    if (file.empty())
      file = fs::temp_directory_path() /
             ("cube_cache_" + std::to_string(::getpid()) + "_" + std::to_string(generation) +
              "_" + std::to_string(reinterpret_cast<uintptr_t>(this)) + ".bin");
    fd_ = ::open(file.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0600);
    if (fd_ < 0) raise(Errc::IoError, "cannot open cube cache file " + file.string());
    file_ = file;
  }

  ~CubeCache() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(file_, ec);
    }
  }
  CubeCache(const CubeCache&) = delete;
  CubeCache& operator=(const CubeCache&) = delete;

  int64_t generation() const { return generation_; }

  CubeCacheStats stats() const {
    CubeCacheStats s;
    s.memory_hits = memory_hits_.load(std::memory_order_relaxed);
    s.disk_hits = disk_hits_.load(std::memory_order_relaxed);
    s.backing_reads = backing_reads_.load(std::memory_order_relaxed);
    s.not_found = not_found_.load(std::memory_order_relaxed);
    return s;
  }

  // Per-key result preserving input order; each key is served from the memory
  // level, else the disk level, else the backing snapshot (and then cached).
  std::vector<std::optional<SparseParameter>> get(const CubeSnapshot& backing,
                                                  std::span<const FeatureSignature> keys) {
    if (backing.generation() != generation_)
      raise(Errc::GenerationMismatch,
            "cache generation " + std::to_string(generation_) + " != snapshot " +
                std::to_string(backing.generation()));
    std::vector<std::optional<SparseParameter>> out(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) {
      const uint64_t sig = keys[i].value;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (SparseParameter* hit = memory_.get(sig)) {
          disk_.get(sig);  // keep the lower level's counter in step
          out[i] = *hit;
          memory_hits_.fetch_add(1, std::memory_order_relaxed);
          continue;
        }
        if (uint64_t* offset = disk_.get(sig)) {
          out[i] = read_slot(*offset);
          disk_hits_.fetch_add(1, std::memory_order_relaxed);
          maybe_promote(sig, *out[i]);
          continue;
        }
      }
      // Backing access outside the lock: the snapshot is immutable.
      auto fetched = backing.find(keys[i]);
      if (!fetched.has_value()) {
        not_found_.fetch_add(1, std::memory_order_relaxed);
        out[i] = std::nullopt;
        continue;
      }
      backing_reads_.fetch_add(1, std::memory_order_relaxed);
      {
        std::lock_guard<std::mutex> lk(mu_);
        insert_disk(sig, *fetched);
      }
      out[i] = std::move(fetched);
    }
    return out;
  }

  size_t memory_size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return memory_.size();
  }
  size_t disk_size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return disk_.size();
  }

 private:
  void insert_disk(uint64_t sig, const SparseParameter& value) {
    if (disk_.capacity() == 0) return;
    if (disk_.contains(sig)) return;  // racing insert of the same key
    uint64_t offset;
    if (!free_slots_.empty()) {
      offset = free_slots_.back();
      free_slots_.pop_back();
    } else {
      offset = file_end_;
      file_end_ += value_bytes_;
    }
    write_slot(offset, value);
    if (auto evicted = disk_.put(sig, offset)) {
      // A key leaving the disk level leaves the hierarchy entirely.
      memory_.erase(*evicted);
      auto it = slot_of_.find(*evicted);
      if (it != slot_of_.end()) {
        free_slots_.push_back(it->second);
        slot_of_.erase(it);
      }
    }
    slot_of_[sig] = offset;
  }

  void maybe_promote(uint64_t sig, const SparseParameter& value) {
    if (memory_.capacity() == 0 || memory_.contains(sig)) return;
    uint64_t freq = disk_.frequency(sig);
    if (memory_.size() < memory_.capacity() || freq > memory_.min_frequency())
      memory_.put_with_freq(sig, value, freq);
  }

  void write_slot(uint64_t offset, const SparseParameter& p) {
    std::string bytes;
    bytes.reserve(value_bytes_);
    for (float f : p.embedding) detail::put_f32(bytes, f);
    detail::put_f32(bytes, p.show_count);
    detail::put_f32(bytes, p.click_count);
    if (::pwrite(fd_, bytes.data(), bytes.size(), static_cast<off_t>(offset)) !=
        static_cast<ssize_t>(bytes.size()))
      raise(Errc::IoError, "cube cache write failed");
  }

  SparseParameter read_slot(uint64_t offset) const {
    std::vector<char> buf(value_bytes_);
    if (::pread(fd_, buf.data(), buf.size(), static_cast<off_t>(offset)) !=
        static_cast<ssize_t>(buf.size()))
      raise(Errc::IoError, "cube cache read failed");
    SparseParameter p;
    p.embedding.resize(embedding_dim_);
    for (uint32_t i = 0; i < embedding_dim_; ++i)
      p.embedding[i] = detail::get_f32(buf.data() + 4 * i);
    p.show_count = detail::get_f32(buf.data() + 4 * embedding_dim_);
    p.click_count = detail::get_f32(buf.data() + 4 * embedding_dim_ + 4);
    return p;
  }

  const int64_t generation_;
  const size_t value_bytes_;
  const uint32_t embedding_dim_;

  mutable std::mutex mu_;
  LfuCache<uint64_t, SparseParameter> memory_;
  LfuCache<uint64_t, uint64_t> disk_;  // signature -> offset in cache file
  std::unordered_map<uint64_t, uint64_t> slot_of_;
  std::vector<uint64_t> free_slots_;
  uint64_t file_end_ = 0;
  int fd_ = -1;
  fs::path file_;

  std::atomic<uint64_t> memory_hits_{0};
  std::atomic<uint64_t> disk_hits_{0};
  std::atomic<uint64_t> backing_reads_{0};
  std::atomic<uint64_t> not_found_{0};
};

// ---------------------------------------------------------------------------
// Query cache
// ---------------------------------------------------------------------------

struct QueryCacheConfig {
  size_t capacity = 100000;
  int64_t expire_window_ms = 120000;  // tunable time window
  double admission_threshold = 0.5;   // keep high-relevance scores only
};

// LRU cache of final user-item scores, keyed by (user, item, model
// generation). Entries expire after the tunable window and on any feedback
// from the user. Expiry is lazy on get plus an explicit sweep.
class QueryCache {
 public:
  explicit QueryCache(QueryCacheConfig cfg) : cfg_(cfg) {}

  int64_t expire_window_ms() const { return cfg_.expire_window_ms; }

  void set_expire_window_ms(int64_t ms) {
    std::lock_guard<std::mutex> lk(mu_);
    cfg_.expire_window_ms = ms;
  }

  std::optional<double> get(const std::string& user, const std::string& item, int64_t generation,
                            int64_t now_ms) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = index_.find(full_key(user, item, generation));
    if (it == index_.end()) {
      misses_.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
    Entry& e = *it->second;
    if (now_ms - e.insert_ms >= cfg_.expire_window_ms) {
      erase_entry(it->second);
      misses_.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
    order_.splice(order_.begin(), order_, it->second);  // refresh recency
    hits_.fetch_add(1, std::memory_order_relaxed);
    return e.score;
  }

  // Inserts iff the admission predicate holds (default: score >= threshold).
  void put(const std::string& user, const std::string& item, int64_t generation, double score,
           int64_t now_ms) {
    put(user, item, generation, score, now_ms,
        [&](double s) { return s >= cfg_.admission_threshold; });
  }

  void put(const std::string& user, const std::string& item, int64_t generation, double score,
           int64_t now_ms, const std::function<bool(double)>& admit) {
    if (!admit(score)) return;
    std::lock_guard<std::mutex> lk(mu_);
    std::string key = full_key(user, item, generation);
    auto it = index_.find(key);
    if (it != index_.end()) {
      it->second->score = score;
      it->second->insert_ms = now_ms;
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    if (order_.size() >= cfg_.capacity && cfg_.capacity > 0) erase_entry(std::prev(order_.end()));
    order_.push_front(Entry{key, user, score, now_ms});
    index_[key] = order_.begin();
    by_user_[user].insert(key);
  }

  // Drops every cached entry of the user; any feedback kind invalidates.
  size_t feedback(const std::string& user, const std::string& /*event_kind*/ = "click") {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = by_user_.find(user);
    if (it == by_user_.end()) return 0;
    size_t n = 0;
    // erase_entry mutates by_user_, so work off a copy of the key set.
    std::vector<std::string> keys(it->second.begin(), it->second.end());
    for (const auto& key : keys) {
      auto idx = index_.find(key);
      if (idx != index_.end()) {
        erase_entry(idx->second);
        ++n;
      }
    }
    invalidated_.fetch_add(n, std::memory_order_relaxed);
    return n;
  }

  // Periodic expiry of entries older than the window.
  size_t sweep(int64_t now_ms) {
    std::lock_guard<std::mutex> lk(mu_);
    size_t n = 0;
    for (auto it = order_.begin(); it != order_.end();) {
      auto next = std::next(it);
      if (now_ms - it->insert_ms >= cfg_.expire_window_ms) {
        erase_entry(it);
        ++n;
      }
      it = next;
    }
    return n;
  }

  size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return order_.size();
  }

  uint64_t hits() const { return hits_.load(std::memory_order_relaxed); }
  uint64_t misses() const { return misses_.load(std::memory_order_relaxed); }
  uint64_t invalidated() const { return invalidated_.load(std::memory_order_relaxed); }

  double hit_ratio() const {
    uint64_t h = hits(), m = misses();
    return h + m == 0 ? 0.0 : static_cast<double>(h) / static_cast<double>(h + m);
  }

 private:
  struct Entry {
    std::string key;
    std::string user;
    double score;
    int64_t insert_ms;
  };

  static std::string full_key(const std::string& user, const std::string& item,
                              int64_t generation) {
    std::string k;
    k.reserve(user.size() + item.size() + 24);
    k += user;
    k += '\x1f';
    k += item;
    k += '\x1f';
    k += std::to_string(generation);
    return k;
  }

  void erase_entry(std::list<Entry>::iterator it) {
    auto bu = by_user_.find(it->user);
    if (bu != by_user_.end()) {
      bu->second.erase(it->key);
      if (bu->second.empty()) by_user_.erase(bu);
    }
    index_.erase(it->key);
    order_.erase(it);
  }

  QueryCacheConfig cfg_;
  mutable std::mutex mu_;
  std::list<Entry> order_;  // front = most recently used
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
  std::unordered_map<std::string, std::unordered_set<std::string>> by_user_;
  std::atomic<uint64_t> hits_{0};
  std::atomic<uint64_t> misses_{0};
  std::atomic<uint64_t> invalidated_{0};
};

}  // namespace stagepipe
