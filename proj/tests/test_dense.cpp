#include "stagepipe/dense.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace stagepipe;

namespace {

// Independent straight-line evaluation in double precision (the oracle for
// the float implementation).
std::vector<double> naive_forward(const DenseModel& m, const std::vector<float>& input) {
  std::vector<double> cur(input.begin(), input.end());
  for (const auto& l : m.layers) {
    std::vector<double> next(l.rows, 0.0);
    for (uint32_t r = 0; r < l.rows; ++r) {
      double acc = static_cast<double>(l.bias[r]);
      for (uint32_t c = 0; c < l.cols; ++c)
        acc += static_cast<double>(l.weights[static_cast<size_t>(r) * l.cols + c]) * cur[c];
      switch (l.activation) {
        case Activation::Relu: next[r] = acc > 0 ? acc : 0; break;
        case Activation::Sigmoid: next[r] = 1.0 / (1.0 + std::exp(-acc)); break;
        case Activation::Identity: next[r] = acc; break;
      }
    }
    cur = next;
  }
  return cur;
}

DenseModel identity_sigmoid_model(uint32_t dim) {
  DenseModel m;
  m.embedding_dim = dim;
  m.slot_spec.slots = {{"g", Combiner::Sum}};
  DenseLayer l;
  l.rows = dim;
  l.cols = dim;
  l.activation = Activation::Sigmoid;
  l.weights.assign(static_cast<size_t>(dim) * dim, 0.0f);
  for (uint32_t i = 0; i < dim; ++i) l.weights[static_cast<size_t>(i) * dim + i] = 1.0f;
  l.bias.assign(dim, 0.0f);
  m.layers.push_back(std::move(l));
  return m;
}

fs::path temp_file(const std::string& tag) {
  return fs::temp_directory_path() /
         ("stagepipe_dense_" + tag + "_" + std::to_string(::getpid()) + ".bin");
}

}  // namespace

TEST(Forward, IdentityWeightsSigmoidOfZeroIsHalf) {
  auto m = identity_sigmoid_model(4);
  m.validate();
  std::vector<float> zero(4, 0.0f);
  auto out = m.forward(zero);
  ASSERT_EQ(out.size(), 4u);
  for (float v : out) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Forward, TwoLayerModelMatchesNaiveOracleTo1e6Relative) {
  std::mt19937_64 seed_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = make_random_model(1, 8, FeatureSlotSpec{{{"u", Combiner::Sum}, {"i", Combiner::Sum}}},
                               {16}, seed_rng());
    m.validate();
    std::mt19937_64 rng(trial);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::vector<float> input(m.input_dim());
    for (auto& v : input) v = nd(rng);
    auto got = m.forward(input);
    auto want = naive_forward(m, input);
    ASSERT_EQ(got.size(), want.size());
    for (size_t i = 0; i < got.size(); ++i) {
      double denom = std::max(1e-12, std::abs(want[i]));
      EXPECT_LT(std::abs(got[i] - want[i]) / denom, 1e-6);
    }
  }
}

TEST(Forward, BatchedEqualsSerialBitIdentical) {
  auto m = make_random_model(1, 8, FeatureSlotSpec{{{"u", Combiner::Sum}, {"i", Combiner::Mean}}},
                             {32, 8}, 99);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  constexpr size_t kBatch = 17;
  std::vector<float> inputs(kBatch * m.input_dim());
  for (auto& v : inputs) v = nd(rng);
  auto batched = m.forward_batch(inputs, kBatch);
  ASSERT_EQ(batched.size(), kBatch * m.output_dim());
  for (size_t b = 0; b < kBatch; ++b) {
    std::span<const float> one(inputs.data() + b * m.input_dim(), m.input_dim());
    auto serial = m.forward(one);
    for (size_t r = 0; r < serial.size(); ++r)
      EXPECT_EQ(batched[b * m.output_dim() + r], serial[r]);  // bit-identical
  }
}

TEST(Forward, DeterministicAndInRange) {
  auto m = make_random_model(1, 4, FeatureSlotSpec{{{"u", Combiner::Sum}}}, {8}, 7);
  std::mt19937_64 rng(11);
  std::normal_distribution<float> nd(0.0f, 3.0f);
  for (int i = 0; i < 200; ++i) {
    std::vector<float> input(m.input_dim());
    for (auto& v : input) v = nd(rng);
    double s1 = m.score(input);
    double s2 = m.score(input);
    EXPECT_EQ(s1, s2);
    EXPECT_GE(s1, 0.0);
    EXPECT_LE(s1, 1.0);
  }
}

TEST(Forward, DimensionMismatchRejected) {
  auto m = identity_sigmoid_model(4);
  std::vector<float> bad(3, 0.0f);
  try {
    m.forward(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
}

TEST(DenseModel, SaveLoadRoundTripsExactly) {
  auto m = make_random_model(42, 8, FeatureSlotSpec{{{"u", Combiner::Sum}, {"i", Combiner::Mean}}},
                             {16}, 123);
  auto path = temp_file("roundtrip");
  m.save(path);
  auto loaded = DenseModel::load(path);
  EXPECT_EQ(loaded.generation, 42);
  EXPECT_EQ(loaded.embedding_dim, 8u);
  ASSERT_EQ(loaded.layers.size(), m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    EXPECT_EQ(loaded.layers[i].weights, m.layers[i].weights);
    EXPECT_EQ(loaded.layers[i].bias, m.layers[i].bias);
    EXPECT_EQ(loaded.layers[i].activation, m.layers[i].activation);
  }
  ASSERT_EQ(loaded.slot_spec.slots.size(), 2u);
  EXPECT_EQ(loaded.slot_spec.slots[1].combiner, Combiner::Mean);
  std::vector<float> input(m.input_dim(), 0.25f);
  EXPECT_EQ(m.forward(input), loaded.forward(input));
  fs::remove(path);
}

TEST(DenseModel, ValidateCatchesBadShapesAndNonFinite) {
  auto m = identity_sigmoid_model(4);
  {
    auto bad = m;
    bad.layers[0].weights[2] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(bad.validate(), Error);
  }
  {
    auto bad = m;
    DenseLayer extra;
    extra.rows = 1;
    extra.cols = 3;  // disagrees with previous rows=4
    extra.activation = Activation::Sigmoid;
    extra.weights.assign(3, 0.1f);
    extra.bias.assign(1, 0.0f);
    bad.layers.push_back(extra);
    EXPECT_THROW(bad.validate(), Error);
  }
  {
    auto bad = m;
    bad.layers.back().activation = Activation::Identity;  // final must be sigmoid
    EXPECT_THROW(bad.validate(), Error);
  }
}

// ---------------------------------------------------------------------------
// assemble
// ---------------------------------------------------------------------------

namespace {

ParameterLookup table_lookup(const std::map<uint64_t, SparseParameter>& table) {
  return [&table](FeatureSignature s) -> const SparseParameter* {
    auto it = table.find(s.value);
    return it == table.end() ? nullptr : &it->second;
  };
}

}  // namespace

TEST(Assemble, SingleSlotSingleFeatureIsIdentity) {
  std::map<uint64_t, SparseParameter> table;
  table[sign("f1").value] = SparseParameter{{1.0f, 2.0f, 3.0f}, 0, 0};
  FeatureSlotSpec slots{{{"g", Combiner::Sum}}};
  auto v = assemble({{"g", {"f1"}}}, slots, 3, table_lookup(table));
  EXPECT_EQ(v, (std::vector<float>{1.0f, 2.0f, 3.0f}));
}

TEST(Assemble, MeanCombinerAveragesElementwise) {
  std::map<uint64_t, SparseParameter> table;
  table[sign("a").value] = SparseParameter{{2.0f, 4.0f}, 0, 0};
  table[sign("b").value] = SparseParameter{{4.0f, 8.0f}, 0, 0};
  FeatureSlotSpec slots{{{"g", Combiner::Mean}}};
  auto v = assemble({{"g", {"a", "b"}}}, slots, 2, table_lookup(table));
  EXPECT_EQ(v, (std::vector<float>{3.0f, 6.0f}));
}

TEST(Assemble, AllMissingYieldsZeroVectorOfInputDim) {
  std::map<uint64_t, SparseParameter> table;
  FeatureSlotSpec slots{{{"u", Combiner::Sum}, {"i", Combiner::Mean}}};
  auto v = assemble({{"u", {"x", "y"}}, {"i", {}}}, slots, 4, table_lookup(table));
  ASSERT_EQ(v.size(), 8u);
  for (float f : v) EXPECT_EQ(f, 0.0f);
}

TEST(Assemble, UnknownGroupIsRequestFatal) {
  std::map<uint64_t, SparseParameter> table;
  FeatureSlotSpec slots{{{"g", Combiner::Sum}}};
  try {
    assemble({{"mystery", {"f"}}}, slots, 2, table_lookup(table));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownGroup);
  }
}

TEST(Assemble, SlotOrderFixesConcatenationLayout) {
  std::map<uint64_t, SparseParameter> table;
  table[sign("uf").value] = SparseParameter{{1.0f, 1.0f}, 0, 0};
  table[sign("if").value] = SparseParameter{{2.0f, 2.0f}, 0, 0};
  FeatureSlotSpec slots{{{"u", Combiner::Sum}, {"i", Combiner::Sum}}};
  auto v = assemble({{"u", {"uf"}}, {"i", {"if"}}}, slots, 2, table_lookup(table));
  EXPECT_EQ(v, (std::vector<float>{1.0f, 1.0f, 2.0f, 2.0f}));
}
