#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "stagepipe/common.hpp"

namespace stagepipe {

namespace fs = std::filesystem;

// 64-bit key of the sparse parameter cube. Produced only by sign(): equal raw
// feature strings yield equal signatures.
struct FeatureSignature {
  uint64_t value = 0;
  bool operator==(const FeatureSignature&) const = default;
  auto operator<=>(const FeatureSignature&) const = default;
};

inline FeatureSignature sign(std::string_view raw_feature) {
  return FeatureSignature{fnv1a64(raw_feature)};
}

// Embedding plus user-feedback statistics; the value type of the cube.
struct SparseParameter {
  std::vector<float> embedding;
  float show_count = 0.0f;
  float click_count = 0.0f;

  bool operator==(const SparseParameter&) const = default;
};

enum class Placement { Memory, Disk };

struct PlacementPolicy {
  enum class Kind { AllMemory, AllDisk, Split } kind = Kind::AllDisk;
  double memory_fraction = 0.0;  // for Split: leading fraction of blocks kept in memory

  static PlacementPolicy parse(const std::string& s) {
    if (s == "memory") return {Kind::AllMemory, 1.0};
    if (s == "disk") return {Kind::AllDisk, 0.0};
    if (s.rfind("split:", 0) == 0) {
      double f = std::stod(s.substr(6));
      if (f < 0.0 || f > 1.0) raise(Errc::InvalidConfig, "split fraction out of [0,1]");
      return {Kind::Split, f};
    }
    raise(Errc::InvalidConfig, "placement policy must be memory|disk|split:<f>");
  }
};

struct BlockMeta {
  uint32_t id = 0;
  Placement placement = Placement::Memory;
  uint64_t byte_length = 0;
  uint64_t checksum = 0;  // FNV-1a of the block file bytes
};

struct CubeManifest {
  int64_t generation = 0;
  uint32_t embedding_dim = 0;
  uint32_t shard_count = 1;
  std::vector<BlockMeta> blocks;
  std::map<std::string, std::string> dense_models;  // model name -> file in the same dir

  Json to_json() const {
    Json j;
    j["generation"] = generation;
    j["embedding_dim"] = embedding_dim;
    j["shard_count"] = shard_count;
    j["blocks"] = Json::array();
    for (const auto& b : blocks) {
      std::ostringstream hex;
      hex << std::hex << std::setw(16) << std::setfill('0') << b.checksum;
      j["blocks"].push_back({{"id", b.id},
                             {"placement", b.placement == Placement::Memory ? "memory" : "disk"},
                             {"byte_length", b.byte_length},
                             {"checksum", hex.str()}});
    }
    if (!dense_models.empty()) j["dense"] = dense_models;
    return j;
  }

  static CubeManifest from_json(const Json& j) {
    CubeManifest m;
    m.generation = j.at("generation").get<int64_t>();
    m.embedding_dim = j.at("embedding_dim").get<uint32_t>();
    m.shard_count = j.at("shard_count").get<uint32_t>();
    for (const auto& jb : j.at("blocks")) {
      BlockMeta b;
      b.id = jb.at("id").get<uint32_t>();
      b.placement =
          jb.at("placement").get<std::string>() == "memory" ? Placement::Memory : Placement::Disk;
      b.byte_length = jb.at("byte_length").get<uint64_t>();
      b.checksum = std::stoull(jb.at("checksum").get<std::string>(), nullptr, 16);
      m.blocks.push_back(b);
    }
    if (j.contains("dense"))
      for (auto it = j["dense"].begin(); it != j["dense"].end(); ++it)
        m.dense_models[it.key()] = it.value().get<std::string>();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Little-endian packing
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

inline void put_u64(std::string& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 8);
}

inline void put_f32(std::string& out, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

inline uint32_t get_u32(const char* p) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

inline uint64_t get_u64(const char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

inline float get_f32(const char* p) {
  uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

inline constexpr size_t kIndexRecordBytes = 8 + 4 + 8;  // sig, block id, offset

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) raise(Errc::IoError, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) raise(Errc::IoError, "cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(Errc::IoError, "short write to " + p.string());
}

}  // namespace detail

inline size_t cube_value_bytes(uint32_t embedding_dim) {
  return static_cast<size_t>(embedding_dim) * 4 + 8;
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

// Writes a cube directory: manifest.json, per-shard index_<s>.bin (signature
// ascending), block_<id>.bin value files, and a DONE sentinel written last.
// Duplicate raw features: last occurrence wins. Shard = signature mod
// shard_count; blocks never span shards.
class CubeBuilder {
 public:
  CubeBuilder(fs::path dir, int64_t generation, uint32_t embedding_dim, uint32_t shard_count,
              uint64_t block_size_bytes, PlacementPolicy placement)
      : dir_(std::move(dir)),
        generation_(generation),
        embedding_dim_(embedding_dim),
        shard_count_(shard_count),
        block_size_bytes_(block_size_bytes),
        placement_(placement) {
    if (embedding_dim_ == 0) raise(Errc::InvalidConfig, "embedding_dim must be positive");
    if (shard_count_ == 0) raise(Errc::InvalidConfig, "shard_count must be positive");
    if (block_size_bytes_ <= cube_value_bytes(embedding_dim_))
      raise(Errc::InvalidConfig, "block_size_bytes must exceed a single value");
  }

  void add(std::string_view raw_feature, SparseParameter param) {
    if (param.embedding.size() != embedding_dim_)
      raise(Errc::DimensionMismatch,
            "embedding length " + std::to_string(param.embedding.size()) + " != declared " +
                std::to_string(embedding_dim_));
    if (param.show_count < 0.0f || param.click_count < 0.0f)
      raise(Errc::InvalidConfig, "feedback stats must be nonnegative");
    staged_[sign(raw_feature).value] = std::move(param);  // last write wins
  }

  CubeManifest finalize() {
    if (staged_.empty()) raise(Errc::EmptyInput, "no key-value pairs to build");
    fs::create_directories(dir_);

    // Bucket signatures per shard, sorted ascending.
    std::vector<std::vector<uint64_t>> shard_keys(shard_count_);
    for (const auto& [sig, _] : staged_) shard_keys[sig % shard_count_].push_back(sig);
    for (auto& keys : shard_keys) std::sort(keys.begin(), keys.end());

    CubeManifest manifest;
    manifest.generation = generation_;
    manifest.embedding_dim = embedding_dim_;
    manifest.shard_count = shard_count_;

    uint32_t next_block = 0;
    std::string block_bytes;
    std::vector<std::string> index_bytes(shard_count_);

    auto flush_block = [&] {
      if (block_bytes.empty()) return;
      BlockMeta meta;
      meta.id = next_block++;
      meta.byte_length = block_bytes.size();
      meta.checksum = fnv1a64(block_bytes);
      detail::write_file(dir_ / ("block_" + std::to_string(meta.id) + ".bin"), block_bytes);
      manifest.blocks.push_back(meta);
      block_bytes.clear();
    };

    for (uint32_t s = 0; s < shard_count_; ++s) {
      for (uint64_t sig : shard_keys[s]) {
        const SparseParameter& p = staged_.at(sig);
        if (block_bytes.size() + cube_value_bytes(embedding_dim_) > block_size_bytes_)
          flush_block();
        detail::put_u64(index_bytes[s], sig);
        detail::put_u32(index_bytes[s], next_block);
        detail::put_u64(index_bytes[s], block_bytes.size());
        for (float f : p.embedding) detail::put_f32(block_bytes, f);
        detail::put_f32(block_bytes, p.show_count);
        detail::put_f32(block_bytes, p.click_count);
      }
      flush_block();  // blocks do not span shards
    }

    // Leading fraction of blocks is memory-resident under a split policy.
    size_t memory_blocks = 0;
    switch (placement_.kind) {
      case PlacementPolicy::Kind::AllMemory: memory_blocks = manifest.blocks.size(); break;
      case PlacementPolicy::Kind::AllDisk: memory_blocks = 0; break;
      case PlacementPolicy::Kind::Split:
        memory_blocks = static_cast<size_t>(placement_.memory_fraction *
                                            static_cast<double>(manifest.blocks.size()));
        break;
    }
    for (size_t i = 0; i < manifest.blocks.size(); ++i)
      manifest.blocks[i].placement = i < memory_blocks ? Placement::Memory : Placement::Disk;

    for (uint32_t s = 0; s < shard_count_; ++s)
      detail::write_file(dir_ / ("index_" + std::to_string(s) + ".bin"), index_bytes[s]);
    detail::write_file(dir_ / "manifest.json", manifest.to_json().dump(2));
    detail::write_file(dir_ / "DONE", "");
    return manifest;
  }

 private:
  fs::path dir_;
  int64_t generation_;
  uint32_t embedding_dim_;
  uint32_t shard_count_;
  uint64_t block_size_bytes_;
  PlacementPolicy placement_;
  std::unordered_map<uint64_t, SparseParameter> staged_;
};

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

// Immutable, fully verified view of one cube generation. All keys live in
// memory (sorted per shard); values decode from memory-resident blocks or via
// one positioned read against a disk block.
class CubeSnapshot {
 public:
  struct IndexEntry {
    uint64_t signature;
    uint32_t block_id;
    uint64_t offset;
  };

  // Loads and verifies a cube directory: manifest checksums of every block,
  // index sortedness, and offset bounds. Throws VerificationFailed on any
  // mismatch; the caller's current snapshot is untouched.
  static std::shared_ptr<const CubeSnapshot> load(const fs::path& dir) {
    auto snap = std::make_shared<CubeSnapshot>();
    try {
      snap->dir_ = dir;
      snap->manifest_ = CubeManifest::from_json(Json::parse(detail::read_file(dir / "manifest.json")));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      raise(Errc::VerificationFailed, "manifest unreadable: " + std::string(e.what()));
    }
    const auto& m = snap->manifest_;
    const size_t value_bytes = cube_value_bytes(m.embedding_dim);

    snap->blocks_.resize(m.blocks.size());
    for (const auto& meta : m.blocks) {
      if (meta.id >= snap->blocks_.size())
        raise(Errc::VerificationFailed, "non-contiguous block ids");
      fs::path bp = dir / ("block_" + std::to_string(meta.id) + ".bin");
      std::string bytes;
      try {
        bytes = detail::read_file(bp);
      } catch (const std::exception&) {
        raise(Errc::VerificationFailed, "missing block file " + bp.string());
      }
      if (bytes.size() != meta.byte_length || fnv1a64(bytes) != meta.checksum)
        raise(Errc::VerificationFailed, "checksum mismatch on " + bp.string());
      auto& blk = snap->blocks_[meta.id];
      blk.meta = meta;
      if (meta.placement == Placement::Memory) {
        blk.bytes = std::move(bytes);
      } else {
        blk.fd = ::open(bp.c_str(), O_RDONLY);
        if (blk.fd < 0) raise(Errc::VerificationFailed, "cannot open " + bp.string());
      }
    }

    for (uint32_t s = 0; s < m.shard_count; ++s) {
      std::string bytes;
      try {
        bytes = detail::read_file(dir / ("index_" + std::to_string(s) + ".bin"));
      } catch (const std::exception&) {
        raise(Errc::VerificationFailed, "missing index for shard " + std::to_string(s));
      }
      if (bytes.size() % detail::kIndexRecordBytes != 0)
        raise(Errc::VerificationFailed, "index size not a record multiple");
      auto& index = snap->shards_.emplace_back();
      index.reserve(bytes.size() / detail::kIndexRecordBytes);
      for (size_t off = 0; off + detail::kIndexRecordBytes <= bytes.size();
           off += detail::kIndexRecordBytes) {
        IndexEntry e;
        e.signature = detail::get_u64(bytes.data() + off);
        e.block_id = detail::get_u32(bytes.data() + off + 8);
        e.offset = detail::get_u64(bytes.data() + off + 12);
        if (!index.empty() && index.back().signature >= e.signature)
          raise(Errc::VerificationFailed, "index not strictly ascending");
        if (e.block_id >= snap->blocks_.size() ||
            e.offset + value_bytes > snap->blocks_[e.block_id].meta.byte_length)
          raise(Errc::VerificationFailed, "index entry out of block bounds");
        index.push_back(e);
      }
    }
    return snap;
  }

  const CubeManifest& manifest() const { return manifest_; }
  const fs::path& dir() const { return dir_; }
  int64_t generation() const { return manifest_.generation; }

  size_t key_count() const {
    size_t n = 0;
    for (const auto& s : shards_) n += s.size();
    return n;
  }

  // Constant-time-ish single lookup: binary search of the in-memory shard
  // index, then one decode (memory) or one positioned read (disk).
  std::optional<SparseParameter> find(FeatureSignature key) const {
    const auto& index = shards_[key.value % manifest_.shard_count];
    auto it = std::lower_bound(index.begin(), index.end(), key.value,
                               [](const IndexEntry& e, uint64_t v) { return e.signature < v; });
    if (it == index.end() || it->signature != key.value) return std::nullopt;
    return decode(*it);
  }

  // Batch lookup preserving input order; missing keys yield nullopt.
  std::vector<std::optional<SparseParameter>> lookup(std::span<const FeatureSignature> keys) const {
    std::vector<std::optional<SparseParameter>> out;
    out.reserve(keys.size());
    for (const auto& k : keys) out.push_back(find(k));
    return out;
  }

  CubeSnapshot() = default;
  ~CubeSnapshot() {
    for (auto& b : blocks_)
      if (b.fd >= 0) ::close(b.fd);
  }
  CubeSnapshot(const CubeSnapshot&) = delete;
  CubeSnapshot& operator=(const CubeSnapshot&) = delete;

 private:
  struct Block {
    BlockMeta meta;
    std::string bytes;  // memory placement
    int fd = -1;        // disk placement
  };

  SparseParameter decode(const IndexEntry& e) const {
    const size_t value_bytes = cube_value_bytes(manifest_.embedding_dim);
    const Block& blk = blocks_[e.block_id];
    std::vector<char> buf;
    const char* p = nullptr;
    if (blk.meta.placement == Placement::Memory) {
      p = blk.bytes.data() + e.offset;
    } else {
      buf.resize(value_bytes);
      ssize_t n = ::pread(blk.fd, buf.data(), value_bytes, static_cast<off_t>(e.offset));
      if (n != static_cast<ssize_t>(value_bytes))
        raise(Errc::CorruptBlock,
              "short read in block " + std::to_string(e.block_id) + " at offset " +
                  std::to_string(e.offset));
      p = buf.data();
    }
    SparseParameter param;
    param.embedding.resize(manifest_.embedding_dim);
    for (uint32_t i = 0; i < manifest_.embedding_dim; ++i)
      param.embedding[i] = detail::get_f32(p + 4 * i);
    param.show_count = detail::get_f32(p + 4 * manifest_.embedding_dim);
    param.click_count = detail::get_f32(p + 4 * manifest_.embedding_dim + 4);
    return param;
  }

  fs::path dir_;
  CubeManifest manifest_;
  std::vector<std::vector<IndexEntry>> shards_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Store with hot reload
// ---------------------------------------------------------------------------

// Serving handle over the current snapshot. hot_reload is the only writer and
// publishes a fully verified snapshot before the swap; readers that acquired
// the old snapshot keep it alive until they release their reference.
class CubeStore {
 public:
  explicit CubeStore(std::shared_ptr<const CubeSnapshot> initial)
      : current_(std::move(initial)) {
    if (!current_) raise(Errc::InvalidConfig, "CubeStore requires an initial snapshot");
  }

  std::shared_ptr<const CubeSnapshot> snapshot() const {
    std::lock_guard<std::mutex> lk(mu_);
    return current_;
  }

  int64_t generation() const { return snapshot()->generation(); }

  // Refuses stale generations before any I/O; on verification failure the old
  // snapshot stays active.
  std::shared_ptr<const CubeSnapshot> hot_reload(const fs::path& new_dir) {
    int64_t current_gen = generation();
    std::shared_ptr<const CubeSnapshot> fresh = CubeSnapshot::load(new_dir);
    if (fresh->generation() <= current_gen)
      raise(Errc::StaleGeneration,
            "generation " + std::to_string(fresh->generation()) + " <= serving " +
                std::to_string(current_gen));
    std::lock_guard<std::mutex> lk(mu_);
    if (fresh->generation() <= current_->generation())
      raise(Errc::StaleGeneration, "lost reload race to a newer generation");
    current_ = fresh;
    return fresh;
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const CubeSnapshot> current_;
};

// ---------------------------------------------------------------------------
// Watcher
// ---------------------------------------------------------------------------

// Polls a model root for complete generation directories (numeric name plus a
// DONE sentinel) and fires the callback once per newly observed highest
// generation. Transient filesystem errors are swallowed and retried.
class ModelWatcher {
 public:
  using Trigger = std::function<void(int64_t generation, const fs::path& dir)>;

  ModelWatcher(fs::path root, std::chrono::milliseconds poll_interval, int64_t current_generation,
               Trigger on_new_generation)
      : root_(std::move(root)),
        interval_(poll_interval),
        last_(current_generation),
        trigger_(std::move(on_new_generation)) {}

  ~ModelWatcher() { stop(); }

  void start() {
    bool expected = false;
    if (!running_.compare_exchange_strong(expected, true)) return;
    thread_ = std::thread([this] {
      while (running_.load()) {
        poll_once();
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait_for(lk, interval_, [this] { return !running_.load(); });
      }
    });
  }

  void stop() {
    bool expected = true;
    if (!running_.compare_exchange_strong(expected, false)) return;
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
  }

  // Scans once; fires at most one trigger (the highest complete generation).
  void poll_once() {
    int64_t best = last_;
    fs::path best_dir;
    try {
      for (const auto& entry : fs::directory_iterator(root_)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        if (name.empty() || name.find_first_not_of("0123456789") != std::string::npos) continue;
        if (!fs::exists(entry.path() / "DONE")) continue;  // incomplete upload
        int64_t gen = std::stoll(name);
        if (gen > best) {
          best = gen;
          best_dir = entry.path();
        }
      }
    } catch (const std::exception&) {
      return;  // transient; retry next poll
    }
    if (best > last_) {
      last_ = best;
      trigger_(best, best_dir);
    }
  }

  int64_t last_generation() const { return last_; }

 private:
  fs::path root_;
  std::chrono::milliseconds interval_;
  std::atomic<int64_t> last_;
  Trigger trigger_;
  std::atomic<bool> running_{false};
  std::thread thread_;
  std::mutex mu_;
  std::condition_variable cv_;
};

}  // namespace stagepipe
