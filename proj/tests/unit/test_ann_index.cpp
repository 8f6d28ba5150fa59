#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "knnprompt/ann_index.hpp"
#include "knnprompt/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace knnprompt;

namespace {

struct Case {
  Datastore store;
  std::vector<std::vector<float>> keys;
  std::vector<std::uint32_t> values;
};

Case random_case(std::mt19937& gen, std::size_t n, std::size_t dim, bool grid = false) {
  std::normal_distribution<float> g;
  Case c{Datastore(dim), {}, {}};
  std::vector<float> flat;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> k(dim);
    // Grid values force many exact distance ties.
    for (auto& x : k) x = grid ? float(int(gen() % 3)) : g(gen);
    flat.insert(flat.end(), k.begin(), k.end());
    c.keys.push_back(k);
    c.values.push_back(gen() % 50);
  }
  c.store = Datastore(dim, flat, c.values);
  return c;
}

void expect_same(const NeighborSet& got, const std::vector<oracle::Hit>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].entry_index, want[i].index) << i;
    EXPECT_EQ(got[i].sq_dist, want[i].dist) << i;
    EXPECT_EQ(got[i].value, want[i].value) << i;
  }
}

}  // namespace

TEST(FlatSearch, TwoPointExamples) {
  const Datastore s(2, {0, 0, 3, 4}, {1, 2});
  const std::vector<float> q = {0, 0};
  EXPECT_EQ(flat_search(s, q, 1), (NeighborSet{{0, 0.0f, 1}}));
  EXPECT_EQ(flat_search(s, q, 2), (NeighborSet{{0, 0.0f, 1}, {1, 25.0f, 2}}));
  EXPECT_EQ(flat_search(s, q, 10).size(), 2u);
}

TEST(FlatSearch, Errors) {
  const Datastore s(2, {0, 0}, {1});
  const std::vector<float> q3 = {0, 0, 0};
  const std::vector<float> q2 = {0, 0};
  EXPECT_THROW(flat_search(s, q3, 1), ConfigError);
  EXPECT_THROW(flat_search(s, q2, 0), ConfigError);
  EXPECT_TRUE(flat_search(Datastore(2), q2, 3).empty());
}

TEST(FlatSearch, MatchesBruteForceWithTies) {
  std::mt19937 gen(17);
  for (int trial = 0; trial < 100; ++trial) {
    const bool grid = trial % 2 == 1;
    auto c = random_case(gen, 1 + gen() % 300, 1 + gen() % 8, grid);
    std::vector<float> q(c.store.dim());
    for (auto& x : q) x = grid ? float(int(gen() % 3)) : float(gen() % 1000) / 500.0f - 1.0f;
    const std::size_t k = 1 + gen() % 40;
    expect_same(flat_search(c.store, q, k), oracle::brute_force(c.keys, c.values, q, k));
  }
}

TEST(FlatSearch, GrowingKExtendsPrefix) {
  std::mt19937 gen(3);
  auto c = random_case(gen, 200, 4, true);
  const std::vector<float> q = {1, 1, 0, 2};
  const auto small = flat_search(c.store, q, 10);
  const auto big = flat_search(c.store, q, 60);
  EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
  EXPECT_TRUE(std::is_sorted(big.begin(), big.end(), neighbor_less));
}

TEST(Ivf, SingleListCentroidIsMean) {
  const Datastore s(2, {0, 0, 2, 0, 4, 6}, {1, 2, 3});
  const auto idx = ivf_build(s, IvfParams{1, 5});
  ASSERT_EQ(idx.nlist(), 1u);
  EXPECT_FLOAT_EQ(idx.centroid(0)[0], 2.0f);
  EXPECT_FLOAT_EQ(idx.centroid(0)[1], 2.0f);
  EXPECT_EQ(idx.list(0).size(), 3u);
}

TEST(Ivf, OneListPerDistinctKey) {
  const Datastore s(1, {0, 10, 20, 30}, {1, 2, 3, 4});
  const auto idx = ivf_build(s, IvfParams{4, 9});
  std::set<std::uint32_t> lists;
  for (auto a : idx.assignments()) lists.insert(a);
  EXPECT_EQ(lists.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    ASSERT_EQ(idx.list(l).size(), 1u);
    EXPECT_EQ(idx.centroid(l)[0], s.key(idx.list(l)[0])[0]);
  }
}

TEST(Ivf, DeterministicAndWorkerIndependent) {
  std::mt19937 gen(8);
  auto c = random_case(gen, 500, 6);
  const auto a = ivf_build(c.store, IvfParams{8, 42, 20, 1});
  const auto b = ivf_build(c.store, IvfParams{8, 42, 20, 1});
  const auto p = ivf_build(c.store, IvfParams{8, 42, 20, 4});
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, p);
}

TEST(Ivf, EveryEntryInNearestCell) {
  std::mt19937 gen(12);
  auto c = random_case(gen, 400, 4);
  const auto idx = ivf_build(c.store, IvfParams{6, 1});
  const auto assign = idx.assignments();
  for (std::size_t e = 0; e < c.store.size(); ++e) {
    const float own = squared_l2(c.store.key(e), idx.centroid(assign[e]));
    for (std::size_t l = 0; l < idx.nlist(); ++l) EXPECT_LE(own, squared_l2(c.store.key(e), idx.centroid(l)));
  }
}

TEST(Ivf, TooFewEntries) {
  const Datastore s(1, {0, 1}, {1, 1});
  EXPECT_THROW(ivf_build(s, IvfParams{3, 0}), ConfigError);
  EXPECT_THROW(ivf_build(s, IvfParams{0, 0}), ConfigError);
}

TEST(IvfSearch, FullProbeEqualsFlat) {
  std::mt19937 gen(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_case(gen, 50 + gen() % 300, 1 + gen() % 8, trial % 3 == 0);
    const std::size_t nlist = 1 + gen() % 10;
    const auto idx = ivf_build(c.store, IvfParams{nlist, gen()});
    std::vector<float> q(c.store.dim());
    for (auto& x : q) x = float(gen() % 3);
    EXPECT_EQ(ivf_search(idx, c.store, q, 15, nlist), flat_search(c.store, q, 15));
  }
}

TEST(IvfSearch, SingleProbeStaysInCluster) {
  std::mt19937 gen(4);
  std::normal_distribution<float> g(0.0f, 0.1f);
  std::vector<float> keys;
  std::vector<TokenId> values;
  for (int i = 0; i < 40; ++i) {
    const float base = i < 20 ? 0.0f : 100.0f;
    keys.push_back(base + g(gen));
    keys.push_back(base + g(gen));
    values.push_back(i < 20 ? 1 : 2);
  }
  const Datastore s(2, keys, values);
  const auto idx = ivf_build(s, IvfParams{2, 3});
  const std::vector<float> q = {0.05f, -0.02f};
  const auto hits = ivf_search(idx, s, q, 30, 1);
  EXPECT_EQ(hits.size(), 20u);  // fewer than k: only one cell probed
  for (const auto& h : hits) EXPECT_EQ(h.value, 1u);
}

TEST(IvfSearch, BadProbeCount) {
  std::mt19937 gen(4);
  auto c = random_case(gen, 20, 2);
  const auto idx = ivf_build(c.store, IvfParams{4, 1});
  const std::vector<float> q = {0, 0};
  EXPECT_THROW(ivf_search(idx, c.store, q, 3, 0), ConfigError);
  EXPECT_THROW(ivf_search(idx, c.store, q, 3, 5), ConfigError);
}

TEST(Recall, FullProbeIsOneAndEmptyQueriesFail) {
  std::mt19937 gen(5);
  auto c = random_case(gen, 100, 3);
  const auto idx = ivf_build(c.store, IvfParams{5, 2});
  std::vector<Embedding> qs(10, Embedding(3));
  for (auto& q : qs)
    for (auto& x : q) x = float(gen() % 100) / 50.0f - 1.0f;
  EXPECT_DOUBLE_EQ(recall_at_k(idx, c.store, qs, 10, 5), 1.0);
  EXPECT_THROW(recall_at_k(idx, c.store, {}, 10, 5), ConfigError);
}

TEST(Recall, MatchesSetIntersectionOracle) {
  std::mt19937 gen(200);
  auto c = random_case(gen, 200, 4);
  const auto idx = ivf_build(c.store, IvfParams{8, 7});
  std::vector<Embedding> qs(25, Embedding(4));
  std::normal_distribution<float> g;
  for (auto& q : qs)
    for (auto& x : q) x = g(gen);
  const std::size_t k = 10;
  double total = 0.0;
  for (const auto& q : qs) {
    std::set<std::uint64_t> exact;
    for (const auto& h : oracle::brute_force(c.keys, c.values, q, k)) exact.insert(h.index);
    std::size_t inter = 0;
    for (const auto& n : ivf_search(idx, c.store, q, k, 4)) inter += exact.count(n.entry_index);
    total += double(inter) / double(k);
  }
  EXPECT_NEAR(recall_at_k(idx, c.store, qs, k, 4), total / qs.size(), 1e-12);
}

TEST(Recall, MonotoneInProbeCount) {
  std::mt19937 gen(31);
  auto c = random_case(gen, 300, 5);
  const auto idx = ivf_build(c.store, IvfParams{10, 3});
  std::vector<Embedding> qs(20, Embedding(5));
  std::normal_distribution<float> g;
  for (auto& q : qs)
    for (auto& x : q) x = g(gen);
  double prev = 0.0;
  for (std::size_t p = 1; p <= 10; ++p) {
    const double r = recall_at_k(idx, c.store, qs, 12, p);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(IvfFile, RoundTripAndErrors) {
  testutil::TempDir dir;
  std::mt19937 gen(1);
  auto c = random_case(gen, 60, 3);
  const auto idx = ivf_build(c.store, IvfParams{4, 77});
  idx.save(dir / "i.knni");
  EXPECT_EQ(IvfIndex::load(dir / "i.knni"), idx);

  const auto bytes = oracle::file_bytes((dir / "i.knni").string());
  std::string b = bytes;
  b[1] = 'Z';
  testutil::write_file(dir / "bad.knni", b);
  try {
    IvfIndex::load(dir / "bad.knni");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::kBadMagic);
  }
  testutil::write_file(dir / "bad.knni", bytes.substr(0, bytes.size() - 8));
  try {
    IvfIndex::load(dir / "bad.knni");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::kTruncated);
  }
}

TEST(Retriever, FlatAndIvf) {
  std::mt19937 gen(2);
  auto c = random_case(gen, 80, 3);
  const auto idx = ivf_build(c.store, IvfParams{4, 1});
  const std::vector<float> q = {0.1f, 0.2f, 0.3f};
  EXPECT_EQ(Retriever(c.store).search(q, 5), flat_search(c.store, q, 5));
  EXPECT_EQ(Retriever(c.store, idx, 2).search(q, 5), ivf_search(idx, c.store, q, 5, 2));
  EXPECT_TRUE(Retriever(c.store, idx, 2).approximate());
  auto other = random_case(gen, 81, 3);
  EXPECT_THROW(Retriever(other.store, idx, 1), ConfigError);
}
