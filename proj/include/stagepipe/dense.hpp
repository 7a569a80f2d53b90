#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stagepipe/common.hpp"
#include "stagepipe/cube.hpp"

namespace stagepipe {

enum class Activation { Relu, Sigmoid, Identity };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "identity") return Activation::Identity;
  raise(Errc::InvalidConfig, "unknown activation " + s);
}

enum class Combiner { Sum, Mean };

// Ordered feature groups feeding the dense input; order is fixed per model
// generation.
struct FeatureSlotSpec {
  struct Slot {
    std::string group;
    Combiner combiner = Combiner::Sum;
  };
  std::vector<Slot> slots;

  size_t size() const { return slots.size(); }
};

struct DenseLayer {
  uint32_t rows = 0;  // output width
  uint32_t cols = 0;  // input width
  Activation activation = Activation::Identity;
  std::vector<float> weights;  // row-major rows x cols
  std::vector<float> bias;     // rows
};

// A moderate-sized feed-forward scorer: affine + activation per layer, final
// sigmoid so scores land in [0,1]. Immutable after load; forward is pure and
// callable concurrently.
class DenseModel {
 public:
  int64_t generation = 0;
  uint32_t embedding_dim = 0;
  FeatureSlotSpec slot_spec;
  std::vector<DenseLayer> layers;

  size_t input_dim() const { return slot_spec.size() * embedding_dim; }
  size_t output_dim() const { return layers.empty() ? 0 : layers.back().rows; }

  void validate() const {
    if (layers.empty()) raise(Errc::ModelLoadFailure, "dense model has no layers");
    if (layers.front().cols != input_dim())
      raise(Errc::ModelLoadFailure, "first layer cols != slots x embedding_dim");
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weights.size() != static_cast<size_t>(l.rows) * l.cols ||
          l.bias.size() != l.rows)
        raise(Errc::ModelLoadFailure, "layer " + std::to_string(i) + " shape mismatch");
      if (i > 0 && l.cols != layers[i - 1].rows)
        raise(Errc::ModelLoadFailure, "adjacent layer dimensions disagree at " + std::to_string(i));
      for (float w : l.weights)
        if (!std::isfinite(w)) raise(Errc::ModelLoadFailure, "non-finite weight");
      for (float b : l.bias)
        if (!std::isfinite(b)) raise(Errc::ModelLoadFailure, "non-finite bias");
    }
    if (layers.back().activation != Activation::Sigmoid)
      raise(Errc::ModelLoadFailure, "final layer must be sigmoid");
  }

  // Single forward pass. The batched path below performs the same per-scalar
  // arithmetic in the same order, so batching never changes the math.
  std::vector<float> forward(std::span<const float> input) const {
    if (input.size() != layers.front().cols)
      raise(Errc::DimensionMismatch,
            "input length " + std::to_string(input.size()) + " != " +
                std::to_string(layers.front().cols));
    std::vector<float> cur(input.begin(), input.end());
    std::vector<float> next;
    for (const auto& l : layers) {
      next.assign(l.rows, 0.0f);
      for (uint32_t r = 0; r < l.rows; ++r) {
        const float* w = l.weights.data() + static_cast<size_t>(r) * l.cols;
        float acc = l.bias[r];
        for (uint32_t c = 0; c < l.cols; ++c) acc += w[c] * cur[c];
        next[r] = activate(l.activation, acc);
      }
      cur.swap(next);
    }
    return cur;
  }

  // Batched forward: inputs is n x input_dim row-major, returns n x output_dim.
  // Weights stream once per row across the whole batch.
  std::vector<float> forward_batch(std::span<const float> inputs, size_t n) const {
    if (n == 0) return {};
    if (inputs.size() != n * layers.front().cols)
      raise(Errc::DimensionMismatch, "batch input size mismatch");
    std::vector<float> cur(inputs.begin(), inputs.end());
    size_t cur_width = layers.front().cols;
    std::vector<float> next;
    for (const auto& l : layers) {
      next.assign(n * l.rows, 0.0f);
      for (uint32_t r = 0; r < l.rows; ++r) {
        const float* w = l.weights.data() + static_cast<size_t>(r) * l.cols;
        for (size_t b = 0; b < n; ++b) {
          const float* x = cur.data() + b * cur_width;
          float acc = l.bias[r];
          for (uint32_t c = 0; c < l.cols; ++c) acc += w[c] * x[c];
          next[b * l.rows + r] = activate(l.activation, acc);
        }
      }
      cur.swap(next);
      cur_width = l.rows;
    }
    return cur;
  }

  // Scoring models end in a single sigmoid unit.
  double score(std::span<const float> input) const {
    auto out = forward(input);
    if (out.size() != 1) raise(Errc::DimensionMismatch, "scoring model must output one unit");
    return out[0];
  }

  // ---- binary io: [u32 header length][JSON header][row-major f32 payload] ----

  void save(const fs::path& path) const {
    Json header;
    header["generation"] = generation;
    header["embedding_dim"] = embedding_dim;
    header["slots"] = Json::array();
    for (const auto& s : slot_spec.slots)
      header["slots"].push_back(
          {{"group", s.group}, {"combiner", s.combiner == Combiner::Sum ? "sum" : "mean"}});
    header["layers"] = Json::array();
    for (const auto& l : layers)
      header["layers"].push_back(
          {{"rows", l.rows}, {"cols", l.cols}, {"activation", activation_name(l.activation)}});
    std::string head = header.dump();

    std::string bytes;
    detail::put_u32(bytes, static_cast<uint32_t>(head.size()));
    bytes += head;
    for (const auto& l : layers) {
      for (float w : l.weights) detail::put_f32(bytes, w);
      for (float b : l.bias) detail::put_f32(bytes, b);
    }
    detail::write_file(path, bytes);
  }

  static DenseModel load(const fs::path& path) {
    std::string bytes;
    try {
      bytes = detail::read_file(path);
    } catch (const std::exception& e) {
      raise(Errc::ModelLoadFailure, e.what());
    }
    if (bytes.size() < 4) raise(Errc::ModelLoadFailure, "truncated dense model " + path.string());
    uint32_t head_len = detail::get_u32(bytes.data());
    if (bytes.size() < 4 + head_len) raise(Errc::ModelLoadFailure, "truncated header");
    Json header;
    try {
      header = Json::parse(bytes.substr(4, head_len));
    } catch (const std::exception& e) {
      raise(Errc::ModelLoadFailure, std::string("bad header: ") + e.what());
    }
    DenseModel m;
    m.generation = header.value("generation", int64_t{0});
    m.embedding_dim = header.at("embedding_dim").get<uint32_t>();
    for (const auto& js : header.at("slots"))
      m.slot_spec.slots.push_back(
          {js.at("group").get<std::string>(),
           js.at("combiner").get<std::string>() == "mean" ? Combiner::Mean : Combiner::Sum});
    size_t off = 4 + head_len;
    for (const auto& jl : header.at("layers")) {
      DenseLayer l;
      l.rows = jl.at("rows").get<uint32_t>();
      l.cols = jl.at("cols").get<uint32_t>();
      l.activation = activation_from(jl.at("activation").get<std::string>());
      size_t wn = static_cast<size_t>(l.rows) * l.cols;
      if (off + (wn + l.rows) * 4 > bytes.size())
        raise(Errc::ModelLoadFailure, "payload shorter than declared shapes");
      l.weights.resize(wn);
      for (size_t i = 0; i < wn; ++i, off += 4) l.weights[i] = detail::get_f32(bytes.data() + off);
      l.bias.resize(l.rows);
      for (size_t i = 0; i < l.rows; ++i, off += 4) l.bias[i] = detail::get_f32(bytes.data() + off);
      m.layers.push_back(std::move(l));
    }
    if (off != bytes.size()) raise(Errc::ModelLoadFailure, "trailing bytes in dense model");
    m.validate();
    return m;
  }

 private:
  static float activate(Activation a, float x) {
    switch (a) {
      case Activation::Relu: return x > 0.0f ? x : 0.0f;
      case Activation::Sigmoid: return 1.0f / (1.0f + std::exp(-x));
      case Activation::Identity: return x;
    }
    return x;
  }
};

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

using FeatureGroups = std::map<std::string, std::vector<std::string>>;
using ParameterLookup = std::function<const SparseParameter*(FeatureSignature)>;

// Concatenation over slots of the combined group embeddings. Missing
// parameters and empty groups contribute zero vectors; a request group that
// is not in the slot spec is request-fatal.
inline std::vector<float> assemble(const FeatureGroups& request_features,
                                   const FeatureSlotSpec& slots, uint32_t embedding_dim,
                                   const ParameterLookup& params) {
  for (const auto& [group, _] : request_features) {
    bool known = false;
    for (const auto& s : slots.slots)
      if (s.group == group) {
        known = true;
        break;
      }
    if (!known) raise(Errc::UnknownGroup, "request group " + group + " not in slot spec");
  }
  std::vector<float> out(slots.size() * embedding_dim, 0.0f);
  for (size_t si = 0; si < slots.slots.size(); ++si) {
    const auto& slot = slots.slots[si];
    auto it = request_features.find(slot.group);
    if (it == request_features.end() || it->second.empty()) continue;  // zero vector
    float* dst = out.data() + si * embedding_dim;
    size_t n = it->second.size();
    for (const auto& raw : it->second) {
      const SparseParameter* p = params(sign(raw));
      if (p == nullptr) continue;  // zero embedding for cube misses
      for (uint32_t d = 0; d < embedding_dim; ++d) dst[d] += p->embedding[d];
    }
    if (slot.combiner == Combiner::Mean)
      for (uint32_t d = 0; d < embedding_dim; ++d) dst[d] /= static_cast<float>(n);
  }
  return out;
}

// Deterministic random MLP for harnesses and synthetic generations: hidden
// relu layers, one sigmoid output unit.
inline DenseModel make_random_model(int64_t generation, uint32_t embedding_dim,
                                    FeatureSlotSpec slots, const std::vector<uint32_t>& hidden,
                                    uint64_t seed) {
  DenseModel m;
  m.generation = generation;
  m.embedding_dim = embedding_dim;
  m.slot_spec = std::move(slots);
  std::mt19937_64 rng(seed);
  uint32_t in = static_cast<uint32_t>(m.input_dim());
  std::vector<uint32_t> widths = hidden;
  widths.push_back(1);
  for (size_t i = 0; i < widths.size(); ++i) {
    DenseLayer l;
    l.rows = widths[i];
    l.cols = in;
    l.activation = (i + 1 == widths.size()) ? Activation::Sigmoid : Activation::Relu;
    std::normal_distribution<float> nd(0.0f, 1.0f / std::sqrt(static_cast<float>(l.cols)));
    l.weights.resize(static_cast<size_t>(l.rows) * l.cols);
    for (auto& w : l.weights) w = nd(rng);
    l.bias.assign(l.rows, 0.0f);
    m.layers.push_back(std::move(l));
    in = widths[i];
  }
  return m;
}

}  // namespace stagepipe
