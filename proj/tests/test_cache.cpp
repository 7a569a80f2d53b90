#include "stagepipe/cache.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <thread>

#include "reference_caches.hpp"

using namespace stagepipe;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() /
           ("stagepipe_cache_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  fs::create_directories(p);
  return p;
}

// Backing cube over features "f0".."f{n-1}".
struct BackingCube {
  fs::path dir;
  std::shared_ptr<const CubeSnapshot> snapshot;
  std::vector<FeatureSignature> sigs;
};

BackingCube make_backing(size_t n, uint32_t dim, int64_t generation = 1) {
  BackingCube b;
  b.dir = temp_dir("backing");
  CubeBuilder builder(b.dir, generation, dim, 2, 1 << 16, PlacementPolicy{});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> uf(-1, 1);
  for (size_t i = 0; i < n; ++i) {
    SparseParameter p;
    p.embedding.resize(dim);
    for (auto& f : p.embedding) f = uf(rng);
    builder.add("f" + std::to_string(i), p);
    b.sigs.push_back(sign("f" + std::to_string(i)));
  }
  builder.finalize();
  b.snapshot = CubeSnapshot::load(b.dir);
  return b;
}

std::vector<double> zipf_cdf(size_t n, double s) {
  std::vector<double> cdf(n);
  double acc = 0;
  for (size_t r = 1; r <= n; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r), s);
    cdf[r - 1] = acc;
  }
  for (auto& c : cdf) c /= acc;
  return cdf;
}

size_t zipf_draw(const std::vector<double>& cdf, std::mt19937_64& rng) {
  double u = std::uniform_real_distribution<double>(0, 1)(rng);
  return static_cast<size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

}  // namespace

// Capacity-2 LFU: insert A,B; access A; insert C -> B evicted
// (freq A=2, B=1, C=1).
TEST(Lfu, HandSimulatedEvictionExample) {
  LfuCache<char, int> lfu(2);
  lfu.put('A', 1);
  lfu.put('B', 2);
  EXPECT_NE(lfu.get('A'), nullptr);
  lfu.put('C', 3);
  EXPECT_TRUE(lfu.contains('A'));
  EXPECT_FALSE(lfu.contains('B'));
  EXPECT_TRUE(lfu.contains('C'));
}

TEST(Lfu, TieBrokenByLeastRecentInsertion) {
  LfuCache<char, int> lfu(2);
  lfu.put('A', 1);
  lfu.put('B', 2);
  lfu.put('C', 3);  // all freq 1; A inserted earliest
  EXPECT_FALSE(lfu.contains('A'));
  EXPECT_TRUE(lfu.contains('B'));
  EXPECT_TRUE(lfu.contains('C'));
}

// Resident sets match the brute-force reference exactly over randomized
// traces, with and without frequency aging.
TEST(LfuOracle, ResidentSetsMatchBruteForceReference) {
  std::mt19937_64 rng(2024);
  for (int trace = 0; trace < 300; ++trace) {
    size_t capacity = 1 + rng() % 10;
    uint64_t aging = (trace % 3 == 0) ? 0 : 20 + rng() % 200;
    int key_space = 2 + static_cast<int>(rng() % 100);
    LfuCache<int, int> impl(capacity, aging);
    reference::BruteForceLfu<int, int> ref(capacity, aging);
    int ops = 50 + static_cast<int>(rng() % 400);
    for (int i = 0; i < ops; ++i) {
      int key = static_cast<int>(rng() % key_space);
      if (rng() % 2 == 0) {
        int* got = impl.get(key);
        auto want = ref.get(key);
        ASSERT_EQ(got != nullptr, want.has_value()) << "trace " << trace << " op " << i;
        if (got) ASSERT_EQ(*got, *want);
      } else {
        int v = static_cast<int>(rng() % 1000);
        impl.put(key, v);
        ref.put(key, v);
      }
      std::set<int> impl_res;
      for (int k : impl.keys()) impl_res.insert(k);
      ASSERT_EQ(impl_res, ref.residents()) << "trace " << trace << " op " << i;
    }
  }
}

TEST(LruOracle, ResidentSetsMatchBruteForceReference) {
  std::mt19937_64 rng(77);
  for (int trace = 0; trace < 300; ++trace) {
    size_t capacity = 1 + rng() % 8;
    QueryCache impl(QueryCacheConfig{capacity, int64_t{1} << 40, -1.0});
    reference::BruteForceLru ref(capacity);
    int key_space = 2 + static_cast<int>(rng() % 40);
    int ops = 30 + static_cast<int>(rng() % 300);
    auto ref_key = [](const std::string& item) {
      std::string k = "u";
      k += '\x1f';
      k += item;
      k += '\x1f';
      k += '1';
      return k;
    };
    for (int i = 0; i < ops; ++i) {
      std::string item = "i" + std::to_string(rng() % key_space);
      if (rng() % 2 == 0) {
        auto got = impl.get("u", item, 1, i);
        auto want = ref.get(ref_key(item));
        ASSERT_EQ(got.has_value(), want.has_value()) << "trace " << trace << " op " << i;
        if (got) ASSERT_DOUBLE_EQ(*got, *want);
      } else {
        double v = static_cast<double>(rng() % 1000);
        impl.put("u", item, 1, v, i);
        ref.put(ref_key(item), v);
      }
    }
    // Resident-set comparison: probe every possible key on both sides; the
    // probes mutate recency identically, so parity is preserved.
    EXPECT_EQ(impl.size(), ref.residents().size());
    for (int k = 0; k < key_space; ++k) {
      std::string item = "i" + std::to_string(k);
      auto got = impl.get("u", item, 1, ops);
      auto want = ref.get(ref_key(item));
      ASSERT_EQ(got.has_value(), want.has_value()) << "trace " << trace << " key " << item;
    }
  }
}

TEST(QueryCache, ExpiryBoundaryIsStrict) {
  QueryCache qc(QueryCacheConfig{100, 120000, 0.0});
  qc.put("u1", "i1", 7, 0.9, 0);
  EXPECT_TRUE(qc.get("u1", "i1", 7, 119000).has_value());
  EXPECT_FALSE(qc.get("u1", "i1", 7, 121000).has_value());
}

TEST(QueryCache, FeedbackInvalidatesAllUserEntriesImmediately) {
  QueryCache qc(QueryCacheConfig{100, 120000, 0.0});
  qc.put("u1", "a", 1, 0.9, 0);
  qc.put("u1", "b", 1, 0.8, 0);
  qc.put("u1", "c", 1, 0.7, 0);
  qc.put("u2", "a", 1, 0.6, 0);
  EXPECT_EQ(qc.feedback("u1", "click"), 3u);
  EXPECT_FALSE(qc.get("u1", "a", 1, 1).has_value());
  EXPECT_FALSE(qc.get("u1", "b", 1, 1).has_value());
  EXPECT_TRUE(qc.get("u2", "a", 1, 1).has_value());
  EXPECT_EQ(qc.feedback("unknown"), 0u);
}

TEST(QueryCache, AdmissionPredicateFiltersLowScores) {
  QueryCache qc(QueryCacheConfig{100, 120000, 0.5});
  qc.put("u", "low", 1, 0.4, 0);
  qc.put("u", "high", 1, 0.6, 0);
  EXPECT_FALSE(qc.get("u", "low", 1, 1).has_value());
  EXPECT_TRUE(qc.get("u", "high", 1, 1).has_value());
}

TEST(QueryCache, GenerationIsPartOfTheKey) {
  QueryCache qc(QueryCacheConfig{100, 120000, 0.0});
  qc.put("u", "i", 4, 0.9, 0);
  EXPECT_TRUE(qc.get("u", "i", 4, 1).has_value());
  EXPECT_FALSE(qc.get("u", "i", 5, 1).has_value());  // after hot reload
}

TEST(QueryCache, LruEvictionAtCapacity) {
  QueryCache qc(QueryCacheConfig{2, int64_t{1} << 40, 0.0});
  qc.put("u", "a", 1, 0.9, 0);
  qc.put("u", "b", 1, 0.9, 1);
  qc.get("u", "a", 1, 2);      // a becomes most recent
  qc.put("u", "c", 1, 0.9, 3);  // evicts b
  EXPECT_TRUE(qc.get("u", "a", 1, 4).has_value());
  EXPECT_FALSE(qc.get("u", "b", 1, 4).has_value());
  EXPECT_TRUE(qc.get("u", "c", 1, 4).has_value());
}

// Staleness bound via a timestamped shadow log: a returned score is never
// older than the window and never predates the user's last feedback.
TEST(QueryCacheProperty, NeverReturnsStaleOrPreFeedbackScores) {
  QueryCache qc(QueryCacheConfig{64, 500, 0.0});
  std::mt19937_64 rng(31);
  struct Shadow {
    int64_t insert_ms;
    double score;
  };
  std::map<std::string, Shadow> shadow;
  std::map<std::string, int64_t> last_feedback;
  int64_t now = 0;
  for (int i = 0; i < 20000; ++i) {
    now += rng() % 50;
    std::string user = "u" + std::to_string(rng() % 5);
    std::string item = "i" + std::to_string(rng() % 20);
    int op = static_cast<int>(rng() % 10);
    if (op < 5) {
      auto got = qc.get(user, item, 1, now);
      if (got.has_value()) {
        auto it = shadow.find(user + "|" + item);
        ASSERT_NE(it, shadow.end());
        EXPECT_LT(now - it->second.insert_ms, 500);
        EXPECT_DOUBLE_EQ(*got, it->second.score);
        auto fb = last_feedback.find(user);
        if (fb != last_feedback.end()) EXPECT_GE(it->second.insert_ms, fb->second);
      }
    } else if (op < 9) {
      double score = std::uniform_real_distribution<double>(0, 1)(rng);
      qc.put(user, item, 1, score, now);
      shadow[user + "|" + item] = {now, score};
    } else {
      qc.feedback(user);
      last_feedback[user] = now;
    }
  }
}

TEST(QueryCache, ConcurrentGetFeedbackNeverTorn) {
  QueryCache qc(QueryCacheConfig{10000, int64_t{1} << 40, 0.0});
  for (int i = 0; i < 100; ++i)
    qc.put("u", "i" + std::to_string(i), 1, 0.75, 0);
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::thread reader([&] {
    std::mt19937_64 rng(1);
    while (!stop) {
      auto got = qc.get("u", "i" + std::to_string(rng() % 100), 1, 1);
      if (got.has_value() && *got != 0.75) bad.fetch_add(1);  // torn value
    }
  });
  std::thread writer([&] {
    for (int round = 0; round < 200; ++round) {
      qc.feedback("u");
      for (int i = 0; i < 100; ++i) qc.put("u", "i" + std::to_string(i), 1, 0.75, 1);
    }
  });
  writer.join();
  stop = true;
  reader.join();
  EXPECT_EQ(bad.load(), 0);
}

TEST(CubeCache, SecondAccessIsCacheHitBackingUntouched) {
  auto backing = make_backing(100, 4);
  CubeCacheConfig cfg;
  cfg.memory_capacity = 10;
  cfg.disk_capacity = 50;
  CubeCache cache(cfg, 4, 1);
  std::vector<FeatureSignature> keys = {backing.sigs[3]};
  auto r1 = cache.get(*backing.snapshot, keys);
  ASSERT_TRUE(r1[0].has_value());
  auto s1 = cache.stats();
  EXPECT_EQ(s1.backing_reads, 1u);
  auto r2 = cache.get(*backing.snapshot, keys);
  ASSERT_TRUE(r2[0].has_value());
  EXPECT_EQ(*r1[0], *r2[0]);
  auto s2 = cache.stats();
  EXPECT_EQ(s2.backing_reads, 1u);  // no new backing access
  EXPECT_EQ(s2.memory_hits + s2.disk_hits, 1u);
}

TEST(CubeCache, MissingKeysAreMarkersAndNeverCached) {
  auto backing = make_backing(10, 4);
  CubeCacheConfig cfg;
  cfg.memory_capacity = 4;
  cfg.disk_capacity = 8;
  CubeCache cache(cfg, 4, 1);
  std::vector<FeatureSignature> keys = {sign("absent")};
  auto r = cache.get(*backing.snapshot, keys);
  EXPECT_FALSE(r[0].has_value());
  EXPECT_EQ(cache.stats().not_found, 1u);
  cache.get(*backing.snapshot, keys);
  EXPECT_EQ(cache.stats().not_found, 2u);  // still consults the backing
}

TEST(CubeCache, GenerationMismatchRejected) {
  auto backing = make_backing(10, 4, /*generation=*/2);
  CubeCacheConfig cfg;
  cfg.memory_capacity = 4;
  cfg.disk_capacity = 8;
  CubeCache cache(cfg, 4, /*generation=*/1);
  std::vector<FeatureSignature> keys = {backing.sigs[0]};
  try {
    cache.get(*backing.snapshot, keys);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GenerationMismatch);
  }
}

TEST(CubeCache, ZipfStreamReachesHighHitRatio) {
  auto backing = make_backing(2000, 4);
  CubeCacheConfig cfg;
  cfg.memory_capacity = 20;   // 1%
  cfg.disk_capacity = 200;    // 10%
  CubeCache cache(cfg, 4, 1);
  auto cdf = zipf_cdf(2000, 1.2);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 50000; ++i) {
    std::vector<FeatureSignature> keys = {backing.sigs[zipf_draw(cdf, rng)]};
    auto r = cache.get(*backing.snapshot, keys);
    ASSERT_TRUE(r[0].has_value());
  }
  EXPECT_GT(cache.stats().hit_ratio(), 0.6);
  EXPECT_LE(cache.memory_size(), 20u);
  EXPECT_LE(cache.disk_size(), 200u);
}

// On the calibrated Zipf traces this repo generates, growing the cache never
// hurts the hit ratio (trace-conditional property).
TEST(CubeCacheProperty, HitRatioMonotoneInCapacityOnZipfTrace) {
  auto backing = make_backing(2000, 4);
  auto cdf = zipf_cdf(2000, 1.1);
  std::mt19937_64 rng(13);
  std::vector<size_t> trace;
  for (int i = 0; i < 30000; ++i) trace.push_back(zipf_draw(cdf, rng));

  double prev = -1.0;
  for (size_t disk_cap : {50u, 100u, 200u, 400u}) {
    CubeCacheConfig cfg;
    cfg.memory_capacity = disk_cap / 10;
    cfg.disk_capacity = disk_cap;
    CubeCache cache(cfg, 4, 1);
    for (size_t idx : trace) {
      std::vector<FeatureSignature> keys = {backing.sigs[idx]};
      cache.get(*backing.snapshot, keys);
    }
    double ratio = cache.stats().hit_ratio();
    EXPECT_GE(ratio, prev - 1e-9) << "disk capacity " << disk_cap;
    prev = ratio;
  }
}
