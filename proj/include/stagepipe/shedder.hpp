#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <mutex>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stagepipe/common.hpp"
#include "stagepipe/cube.hpp"
#include "stagepipe/request.hpp"

namespace stagepipe {

inline constexpr size_t kQidBuckets = 16;

// The seven-feature vector driving the cutoff regressor: resource headroom,
// the previous request's cutoff fraction, the item-queue id, and statistics
// of the recall-phase estimated scores.
struct SheddingFeatures {
  double quota = 1.0;              // available resource headroom in [0,1]
  double cutoff_ratio_prev = 0.0;  // previous request's cutoff fraction
  uint64_t qid_hash = 0;
  double escore_avg = 0.0;
  double escore_variance = 0.0;
  double escore_max = 0.0;
  double escore_min = 0.0;

  static SheddingFeatures from_candidates(std::span<const Candidate> sorted, double quota,
                                          double cutoff_prev, const std::string& qid) {
    SheddingFeatures f;
    f.quota = quota;
    f.cutoff_ratio_prev = cutoff_prev;
    f.qid_hash = fnv1a64(qid);
    if (sorted.empty()) return f;
    double sum = 0.0, sum2 = 0.0;
    f.escore_max = sorted.front().escore;
    f.escore_min = sorted.front().escore;
    for (const auto& c : sorted) {
      sum += c.escore;
      sum2 += c.escore * c.escore;
      f.escore_max = std::max(f.escore_max, c.escore);
      f.escore_min = std::min(f.escore_min, c.escore);
    }
    double n = static_cast<double>(sorted.size());
    f.escore_avg = sum / n;
    f.escore_variance = std::max(0.0, sum2 / n - f.escore_avg * f.escore_avg);
    return f;
  }

  // quota, prev cutoff, 16 one-hot qid buckets, then four score statistics.
  static constexpr size_t encoded_dim() { return 2 + kQidBuckets + 4; }

  std::vector<float> encode() const {
    std::vector<float> x(encoded_dim(), 0.0f);
    x[0] = static_cast<float>(quota);
    x[1] = static_cast<float>(cutoff_ratio_prev);
    x[2 + qid_hash % kQidBuckets] = 1.0f;
    x[2 + kQidBuckets + 0] = static_cast<float>(escore_avg);
    x[2 + kQidBuckets + 1] = static_cast<float>(escore_variance);
    x[2 + kQidBuckets + 2] = static_cast<float>(escore_max);
    x[2 + kQidBuckets + 3] = static_cast<float>(escore_min);
    return x;
  }

  Json to_json() const {
    return Json{{"quota", quota},
                {"cutoff_prev", cutoff_ratio_prev},
                {"qid_hash", qid_hash},
                {"escore_avg", escore_avg},
                {"escore_variance", escore_variance},
                {"escore_max", escore_max},
                {"escore_min", escore_min}};
  }

  static SheddingFeatures from_json(const Json& j) {
    SheddingFeatures f;
    f.quota = j.at("quota").get<double>();
    f.cutoff_ratio_prev = j.at("cutoff_prev").get<double>();
    f.qid_hash = j.at("qid_hash").get<uint64_t>();
    f.escore_avg = j.at("escore_avg").get<double>();
    f.escore_variance = j.at("escore_variance").get<double>();
    f.escore_max = j.at("escore_max").get<double>();
    f.escore_min = j.at("escore_min").get<double>();
    return f;
  }
};

// Stable descending sort by estimated score; ties keep input order.
inline void sort_candidates(std::vector<Candidate>& candidates) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.escore > b.escore; });
}

namespace detail {

// Indices of the N largest scores; ties resolved toward the earlier index.
inline std::vector<size_t> top_n_indices(std::span<const double> scores, size_t n) {
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  n = std::min(n, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(n), idx.end(),
                    [&](size_t a, size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(n);
  return idx;
}

inline double recall_at_n(std::span<const double> pruned_scores,
                          std::span<const double> full_scores, size_t n) {
  auto pruned_top = top_n_indices(pruned_scores, n);
  auto full_top = top_n_indices(full_scores, n);
  size_t overlap = 0;
  for (size_t i : pruned_top)
    if (std::find(full_top.begin(), full_top.end(), i) != full_top.end()) ++overlap;
  return full_top.empty() ? 1.0 : static_cast<double>(overlap) / static_cast<double>(full_top.size());
}

}  // namespace detail

using FinalScorer = std::function<std::vector<double>(std::span<const Candidate>)>;

// Label-generating oracle (not the online path): the minimal keep count k*
// >= N whose pruned top-N degrades recall@N against the unpruned top-N by at
// most epsilon, found by brute-force scan over k. Returns |candidates| when
// nothing smaller satisfies epsilon.
inline size_t oracle_cutoff(std::span<const Candidate> candidates_sorted,
                            const FinalScorer& final_scorer, size_t slate_n, double epsilon) {
  const size_t n = candidates_sorted.size();
  if (n == 0) return 0;
  slate_n = std::min(slate_n, n);
  std::vector<double> full_scores = final_scorer(candidates_sorted);
  for (size_t k = slate_n; k < n; ++k) {
    std::vector<double> pruned = final_scorer(candidates_sorted.subspan(0, k));
    if (1.0 - detail::recall_at_n(pruned, full_scores, slate_n) <= epsilon) return k;
  }
  return n;
}

// Shortcut for itemwise scorers (each candidate's final score independent of
// the rest of the list): scoring a prefix equals the prefix of the full score
// vector, so the scan needs one scoring pass.
inline size_t oracle_cutoff_itemwise(std::span<const double> full_scores, size_t slate_n,
                                     double epsilon) {
  const size_t n = full_scores.size();
  if (n == 0) return 0;
  slate_n = std::min(slate_n, n);
  for (size_t k = slate_n; k < n; ++k) {
    if (1.0 - detail::recall_at_n(full_scores.subspan(0, k), full_scores, slate_n) <= epsilon)
      return k;
  }
  return n;
}

// One training example for the pruning regressor.
struct ShedLogRecord {
  SheddingFeatures features;
  uint32_t candidate_count = 0;
  uint32_t oracle_keep = 0;
  double quality_delta = 0.0;

  Json to_json() const {
    Json j = features.to_json();
    j["n"] = candidate_count;
    j["keep"] = oracle_keep;
    j["quality_delta"] = quality_delta;
    return j;
  }

  static ShedLogRecord from_json(const Json& j) {
    ShedLogRecord r;
    r.features = SheddingFeatures::from_json(j);
    r.candidate_count = j.at("n").get<uint32_t>();
    r.oracle_keep = j.at("keep").get<uint32_t>();
    r.quality_delta = j.value("quality_delta", 0.0);
    return r;
  }
};

// Lightweight keep-fraction regressor: one hidden relu layer, linear output
// clamped to [min_keep_fraction, 1]. Immutable after training; predict is
// pure, allocation-free, and fast enough for the per-request path.
class PruningModel {
 public:
  struct Metadata {
    double epsilon = 0.0;
    std::string quality_metric = "recall_at_n";
    uint64_t dataset_hash = 0;
    double holdout_rmse = 0.0;
  };

  double min_keep_fraction = 0.1;
  Metadata meta;

  // layer 1: hidden x in, layer 2: 1 x hidden
  std::vector<float> w1, b1, w2;
  float b2 = 0.0f;
  uint32_t hidden = 0;
  uint32_t input = 0;

  double predict(const SheddingFeatures& f) const {
    float x[SheddingFeatures::encoded_dim()] = {};
    x[0] = static_cast<float>(f.quota);
    x[1] = static_cast<float>(f.cutoff_ratio_prev);
    x[2 + f.qid_hash % kQidBuckets] = 1.0f;
    x[2 + kQidBuckets + 0] = static_cast<float>(f.escore_avg);
    x[2 + kQidBuckets + 1] = static_cast<float>(f.escore_variance);
    x[2 + kQidBuckets + 2] = static_cast<float>(f.escore_max);
    x[2 + kQidBuckets + 3] = static_cast<float>(f.escore_min);
    float out = b2;
    for (uint32_t h = 0; h < hidden; ++h) {
      float acc = b1[h];
      const float* w = w1.data() + static_cast<size_t>(h) * input;
      for (uint32_t c = 0; c < input; ++c) acc += w[c] * x[c];
      if (acc > 0.0f) out += w2[h] * acc;
    }
    return std::clamp(static_cast<double>(out), min_keep_fraction, 1.0);
  }

  void save(const fs::path& path) const {
    Json header{{"min_keep_fraction", min_keep_fraction},
                {"epsilon", meta.epsilon},
                {"quality_metric", meta.quality_metric},
                {"dataset_hash", meta.dataset_hash},
                {"holdout_rmse", meta.holdout_rmse},
                {"hidden", hidden},
                {"input", input}};
    std::string head = header.dump();
    std::string bytes;
    detail::put_u32(bytes, static_cast<uint32_t>(head.size()));
    bytes += head;
    for (float v : w1) detail::put_f32(bytes, v);
    for (float v : b1) detail::put_f32(bytes, v);
    for (float v : w2) detail::put_f32(bytes, v);
    detail::put_f32(bytes, b2);
    detail::write_file(path, bytes);
  }

  static PruningModel load(const fs::path& path) {
    std::string bytes = detail::read_file(path);
    if (bytes.size() < 4) raise(Errc::ModelLoadFailure, "truncated pruning model");
    uint32_t head_len = detail::get_u32(bytes.data());
    Json header = Json::parse(bytes.substr(4, head_len));
    PruningModel m;
    m.min_keep_fraction = header.at("min_keep_fraction").get<double>();
    m.meta.epsilon = header.value("epsilon", 0.0);
    m.meta.quality_metric = header.value("quality_metric", "recall_at_n");
    m.meta.dataset_hash = header.value("dataset_hash", uint64_t{0});
    m.meta.holdout_rmse = header.value("holdout_rmse", 0.0);
    m.hidden = header.at("hidden").get<uint32_t>();
    m.input = header.at("input").get<uint32_t>();
    size_t off = 4 + head_len;
    auto read_floats = [&](std::vector<float>& dst, size_t count) {
      if (off + count * 4 > bytes.size()) raise(Errc::ModelLoadFailure, "short payload");
      dst.resize(count);
      for (size_t i = 0; i < count; ++i, off += 4) dst[i] = detail::get_f32(bytes.data() + off);
    };
    read_floats(m.w1, static_cast<size_t>(m.hidden) * m.input);
    read_floats(m.b1, m.hidden);
    read_floats(m.w2, m.hidden);
    if (off + 4 > bytes.size()) raise(Errc::ModelLoadFailure, "short payload");
    m.b2 = detail::get_f32(bytes.data() + off);
    return m;
  }
};

struct TrainOptions {
  uint32_t hidden = 16;
  uint32_t epochs = 200;
  float learning_rate = 0.05f;
  size_t min_records = 1000;
  double holdout_fraction = 0.2;
  double min_keep_fraction = 0.1;
  double epsilon = 0.05;  // recorded in metadata
};

// Fits keep-fraction = k*/n with minibatch gradient descent on MSE.
// Deterministic under a fixed seed; reports held-out RMSE in the metadata.
inline PruningModel train_pruner(const std::vector<ShedLogRecord>& logs, uint64_t seed,
                                 TrainOptions opt = {}) {
  if (logs.size() < opt.min_records)
    raise(Errc::InsufficientData,
          std::to_string(logs.size()) + " records < required " + std::to_string(opt.min_records));

  const uint32_t in_dim = static_cast<uint32_t>(SheddingFeatures::encoded_dim());
  std::vector<std::vector<float>> xs;
  std::vector<float> ys;
  xs.reserve(logs.size());
  std::string digest;
  for (const auto& r : logs) {
    xs.push_back(r.features.encode());
    ys.push_back(static_cast<float>(r.oracle_keep) / std::max(1.0f, static_cast<float>(r.candidate_count)));
    digest += std::to_string(r.oracle_keep) + ":" + std::to_string(r.candidate_count) + ";";
  }

  std::mt19937_64 rng(seed);
  std::vector<size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  size_t holdout = static_cast<size_t>(static_cast<double>(xs.size()) * opt.holdout_fraction);
  size_t train_n = xs.size() - holdout;

  PruningModel m;
  m.hidden = opt.hidden;
  m.input = in_dim;
  m.min_keep_fraction = opt.min_keep_fraction;
  m.meta.epsilon = opt.epsilon;
  m.meta.dataset_hash = fnv1a64(digest);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  m.w1.resize(static_cast<size_t>(opt.hidden) * in_dim);
  for (auto& w : m.w1) w = nd(rng);
  m.b1.assign(opt.hidden, 0.0f);
  m.w2.resize(opt.hidden);
  for (auto& w : m.w2) w = nd(rng);
  m.b2 = 0.5f;

  const size_t batch = 32;
  std::vector<float> hidden_act(opt.hidden);
  for (uint32_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.begin() + static_cast<long>(train_n), rng);
    for (size_t start = 0; start < train_n; start += batch) {
      size_t end = std::min(train_n, start + batch);
      std::vector<float> gw1(m.w1.size(), 0.0f), gb1(opt.hidden, 0.0f), gw2(opt.hidden, 0.0f);
      float gb2 = 0.0f;
      for (size_t bi = start; bi < end; ++bi) {
        const auto& x = xs[order[bi]];
        float target = ys[order[bi]];
        float out = m.b2;
        for (uint32_t h = 0; h < opt.hidden; ++h) {
          float acc = m.b1[h];
          const float* w = m.w1.data() + static_cast<size_t>(h) * in_dim;
          for (uint32_t c = 0; c < in_dim; ++c) acc += w[c] * x[c];
          hidden_act[h] = acc > 0.0f ? acc : 0.0f;
          out += m.w2[h] * hidden_act[h];
        }
        float dout = 2.0f * (out - target) / static_cast<float>(end - start);
        gb2 += dout;
        for (uint32_t h = 0; h < opt.hidden; ++h) {
          gw2[h] += dout * hidden_act[h];
          if (hidden_act[h] > 0.0f) {
            float dh = dout * m.w2[h];
            gb1[h] += dh;
            float* gw = gw1.data() + static_cast<size_t>(h) * in_dim;
            for (uint32_t c = 0; c < in_dim; ++c) gw[c] += dh * x[c];
          }
        }
      }
      for (size_t i = 0; i < m.w1.size(); ++i) m.w1[i] -= opt.learning_rate * gw1[i];
      for (uint32_t h = 0; h < opt.hidden; ++h) {
        m.b1[h] -= opt.learning_rate * gb1[h];
        m.w2[h] -= opt.learning_rate * gw2[h];
      }
      m.b2 -= opt.learning_rate * gb2;
    }
  }

  double se = 0.0;
  size_t eval_n = holdout > 0 ? holdout : xs.size();
  for (size_t i = 0; i < eval_n; ++i) {
    size_t idx = holdout > 0 ? order[train_n + i] : i;
    float out = m.b2;
    for (uint32_t h = 0; h < m.hidden; ++h) {
      float acc = m.b1[h];
      const float* w = m.w1.data() + static_cast<size_t>(h) * in_dim;
      for (uint32_t c = 0; c < in_dim; ++c) acc += w[c] * xs[idx][c];
      if (acc > 0.0f) out += m.w2[h] * acc;
    }
    double pred = std::clamp(static_cast<double>(out), m.min_keep_fraction, 1.0);
    double err = pred - static_cast<double>(ys[idx]);
    se += err * err;
  }
  m.meta.holdout_rmse = std::sqrt(se / static_cast<double>(eval_n));
  return m;
}

// The online decision. Shedding activates only past the capacity threshold;
// under overload the keep count is max(N, round(model(features) * n)).
// Dropped candidates never reach the re-ranking stages. Pure: reads features
// and model only.
inline size_t shed(const PruningModel& model, const SheddingFeatures& features,
                   std::span<const Candidate> candidates_sorted, size_t slate_n, bool overload) {
  const size_t n = candidates_sorted.size();
  if (!overload) return n;
  if (n == 0) return 0;
  double fraction = model.predict(features);
  auto keep = static_cast<size_t>(std::lround(fraction * static_cast<double>(n)));
  keep = std::max(keep, std::min(slate_n, n));
  return std::min(keep, n);
}

// ---------------------------------------------------------------------------
// Overload detection
// ---------------------------------------------------------------------------

// Arrival-rate tracker over a sliding window of logical time. Shedding
// activates when the measured rate exceeds capacity_rps * activate_fraction.
class LoadMonitor {
 public:
  LoadMonitor(double capacity_rps, double activate_fraction = 0.8,
              int64_t window_ms = 1000)
      : capacity_rps_(capacity_rps),
        activate_fraction_(activate_fraction),
        window_ms_(window_ms) {}

  void record_arrival(int64_t now_ms) {
    std::lock_guard<std::mutex> lk(mu_);
    arrivals_.push_back(now_ms);
    prune(now_ms);
  }

  double arrival_rate(int64_t now_ms) const {
    std::lock_guard<std::mutex> lk(mu_);
    prune(now_ms);
    return static_cast<double>(arrivals_.size()) * 1000.0 / static_cast<double>(window_ms_);
  }

  bool overloaded(int64_t now_ms) const {
    if (forced_.load(std::memory_order_relaxed)) return true;
    return arrival_rate(now_ms) > capacity_rps_ * activate_fraction_;
  }

  void force_overload(bool on) { forced_.store(on, std::memory_order_relaxed); }

  double quota(int64_t now_ms) const {
    double used = arrival_rate(now_ms) / std::max(1e-9, capacity_rps_);
    return std::clamp(1.0 - used, 0.0, 1.0);
  }

 private:
  void prune(int64_t now_ms) const {
    while (!arrivals_.empty() && arrivals_.front() < now_ms - window_ms_) arrivals_.pop_front();
  }

  double capacity_rps_;
  double activate_fraction_;
  int64_t window_ms_;
  mutable std::mutex mu_;
  mutable std::deque<int64_t> arrivals_;
  std::atomic<bool> forced_{false};
};

}  // namespace stagepipe
