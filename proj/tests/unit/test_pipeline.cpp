#include <gtest/gtest.h>

#include <random>

#include "knnprompt/errors.hpp"
#include "knnprompt/pipeline.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace knnprompt;

namespace {

DenseDist dist4(float a, float b, float c, float d) { return DenseDist(std::vector<float>{a, b, c, d}); }

// Scores every instance of the fixture under the given modes.
std::vector<PromptScores> score_all(const fixture::Synthetic& s, const fixture::Built& b,
                                    const Retriever* retriever, RetrievalConfig cfg, PmiPrior prior,
                                    const CompiledTask& task, std::span<const ScoringMode> modes) {
  const Scorer scorer(task, s.vocab, ScoringResources{b.lm.get(), retriever, cfg, prior}, modes);
  std::vector<PromptScores> out;
  for (const auto& x : s.test) out.push_back(scorer.score(render_prompt(task.spec, x.text, s.vocab)));
  return out;
}

}  // namespace

TEST(Modes, NamesAndFeatures) {
  for (auto m : kAllModes) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("KNN"), ConfigError);
  const auto f = features(ScoringMode::kKnnPrompt);
  EXPECT_TRUE(f.retrieval && f.fuzzy && f.pmi);
  const auto g = features(ScoringMode::kLm);
  EXPECT_FALSE(g.retrieval || g.fuzzy || g.pmi);
  EXPECT_EQ(parse_prior("uniform"), PmiPrior::kUniform);
  EXPECT_THROW(parse_prior("none"), ConfigError);
}

TEST(ScorePlain, Examples) {
  const std::vector<Neighborhood> v = {{0}, {1}};
  const auto s = score_plain(dist4(0.3f, 0.1f, 0.4f, 0.2f), v);
  EXPECT_NEAR(s.scores[0], 0.75, 1e-6);
  EXPECT_NEAR(s.scores[1], 0.25, 1e-6);
  EXPECT_TRUE(s.normalized);
  const auto sym = score_plain(dist4(0.25f, 0.25f, 0.25f, 0.25f), v);
  EXPECT_EQ(sym.scores[0], 0.5);
  EXPECT_EQ(sym.argmax(), 0u);
  const auto zero = score_plain(dist4(0.0f, 0.5f, 0.5f, 0.0f), v);
  EXPECT_EQ(zero.scores[1], 1.0);
  EXPECT_THROW(score_plain(dist4(0.0f, 0.0f, 0.5f, 0.5f), v), DataError);
}

TEST(ScoreFuzzy, Examples) {
  const auto d = dist4(0.2f, 0.1f, 0.1f, 0.6f);  // great, excellent, terrible, other
  const std::vector<Neighborhood> n = {{0, 1}, {2}};
  const auto s = score_fuzzy(d, n);
  EXPECT_NEAR(s.scores[0], 0.75, 1e-6);
  EXPECT_NEAR(s.scores[1], 0.25, 1e-6);
  const std::vector<Neighborhood> single = {{0}, {2}};
  EXPECT_EQ(score_fuzzy(d, single).scores, score_plain(d, single).scores);
  // A shared token counts for both labels.
  const std::vector<Neighborhood> overlap = {{0, 3}, {2, 3}};
  const auto o = score_fuzzy(d, overlap);
  EXPECT_NEAR(o.scores[0], 0.8 / 1.5, 1e-6);
  EXPECT_NEAR(o.scores[1], 0.7 / 1.5, 1e-6);
}

TEST(Pmi, Examples) {
  const auto p = dist4(0.2f, 0.3f, 0.4f, 0.1f);
  for (TokenId t = 0; t < 4; ++t) EXPECT_DOUBLE_EQ(pmi_dc(p, p, t), 1.0);
  const auto dom = dist4(0.1f, 0.3f, 0.6f, 0.0f);
  EXPECT_NEAR(pmi_dc(p, dom, 0), 2.0, 1e-6);
  try {
    pmi_dc(p, dom, 3);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zero domain prior"), std::string::npos);
  }
}

TEST(Pmi, UniformPriorPreservesArgmax) {
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(30);
    for (auto& x : w) x = u(gen);
    const auto p = normalize(w);
    const auto uni = DenseDist::uniform(30);
    std::size_t best_p = 0, best_pmi = 0;
    for (TokenId t = 1; t < 30; ++t) {
      if (p[t] > p[best_p]) best_p = t;
      if (pmi_dc(p, uni, t) > pmi_dc(p, uni, TokenId(best_pmi))) best_pmi = t;
    }
    EXPECT_EQ(best_p, best_pmi);
  }
}

TEST(ScoreFull, HandPmiSums) {
  const auto prompt = dist4(0.4f, 0.1f, 0.2f, 0.3f);
  const auto domain = dist4(0.2f, 0.2f, 0.4f, 0.2f);
  const std::vector<Neighborhood> n = {{0, 1}, {2, 3}};
  // pos: 0.4/0.2 + 0.1/0.2 = 2.5; neg: 0.2/0.4 + 0.3/0.2 = 2.0.
  const auto s = score_full(prompt, domain, n);
  EXPECT_NEAR(s.scores[0], 2.5 / 4.5, 1e-6);
  EXPECT_NEAR(s.scores[1], 2.0 / 4.5, 1e-6);
}

TEST(ScoreFull, SkipsZeroPriorTokens) {
  const auto prompt = dist4(0.4f, 0.1f, 0.2f, 0.3f);
  const auto domain = dist4(0.5f, 0.0f, 0.5f, 0.0f);
  const std::vector<Neighborhood> n = {{0, 1}, {2, 3}};
  const auto s = score_full(prompt, domain, n);
  EXPECT_EQ(s.skipped_tokens, 2u);
  EXPECT_NEAR(s.scores[0], 0.8 / 1.2, 1e-6);
  const std::vector<Neighborhood> dead = {{1}, {3}};
  EXPECT_THROW(score_full(prompt, domain, dead), DataError);
}

TEST(ScoreFull, SingletonUniformReducesToPlain) {
  std::mt19937 gen(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(12);
    for (auto& x : w) x = u(gen);
    const auto p = normalize(w);
    const std::vector<Neighborhood> v = {{3}, {7}, {1}};
    EXPECT_EQ(score_full(p, DenseDist::uniform(12), v).argmax(), score_plain(p, v).argmax());
  }
}

TEST(LabelScores, ArgmaxTieBreakAndScaleInvariance) {
  EXPECT_EQ((LabelScores{{0.5, 0.5}}).argmax(), 0u);
  EXPECT_EQ((LabelScores{{0.1, 0.7, 0.7}}).argmax(), 1u);
  const LabelScores raw{{0.2, 0.9, 0.4}};
  auto scaled = raw;
  for (auto& x : scaled.scores) x *= 37.5;
  EXPECT_EQ(normalize_scores(raw).argmax(), normalize_scores(scaled).argmax());
  EXPECT_THROW(normalize_scores(LabelScores{{0.0, 0.0}}), DataError);
}

TEST(ScoreChain, ProductOfConditionals) {
  const ToyLbLm lm(6, ToyLmConfig{2});
  const std::vector<TokenId> prompt = {1, 2};
  const std::vector<std::vector<TokenId>> verbs = {{3, 4}, {5}};
  const auto s = score_chain(lm, prompt, verbs);
  const std::vector<TokenId> ext = {1, 2, 3};
  const double a = double(lm.next_dist(prompt)[3]) * lm.next_dist(ext)[4];
  const double b = lm.next_dist(prompt)[5];
  EXPECT_NEAR(s.scores[0], a / (a + b), 1e-12);
}

TEST(NextTokenDist, LambdaZeroAndEmptyStore) {
  const ToyLbLm lm(5, ToyLmConfig{7});
  const Datastore empty(16);
  const Retriever r(empty);
  const std::vector<TokenId> ctx = {1, 2};
  RetrievalConfig cfg;
  EXPECT_EQ(next_token_dist(ctx, lm, &r, cfg, true), lm.next_dist(ctx));
  const auto docs = split_documents("a b c d\n\nd c b", Vocab({"<unk>", "a", "b", "c", "d"}));
  const auto store = build_datastore(docs, lm).store;
  const Retriever full(store);
  cfg.lambda = 0.0;
  EXPECT_EQ(next_token_dist(ctx, lm, &full, cfg, true), lm.next_dist(ctx));
  EXPECT_THROW(next_token_dist(ctx, lm, nullptr, cfg, true), ConfigError);
}

TEST(NextTokenDist, ThreeEntryCompositionOracle) {
  const Vocab vocab({"<unk>", "a", "b", "c", "d"});
  const ToyLbLm lm(5, ToyLmConfig{7});
  const oracle::ToyLm ref(5, 7);
  const auto store = build_datastore(split_documents("a b c d", vocab), lm).store;
  ASSERT_EQ(store.size(), 3u);
  std::vector<std::vector<float>> keys = {ref.encode({1}), ref.encode({1, 2}), ref.encode({1, 2, 3})};
  const std::vector<std::uint32_t> values = {2, 3, 4};
  const Retriever r(store);
  RetrievalConfig cfg;
  cfg.k = 2;
  cfg.temperature = 0.5;
  cfg.lambda = 0.4;
  const std::vector<TokenId> ctx = {4, 2};
  const auto got = next_token_dist(ctx, lm, &r, cfg, true);

  const auto hits = oracle::brute_force(keys, values, ref.encode({4, 2}), 2);
  const auto q = oracle::knn_probs(hits, 0.5);
  const auto p = ref.next_dist({4, 2});
  for (TokenId v = 0; v < 5; ++v) {
    const double knn = q.count(v) ? q.at(v) : 0.0;
    EXPECT_NEAR(got[v], 0.6 * p[v] + 0.4 * knn, 1e-6) << v;
  }
}

TEST(Scorer, ValidatesResources) {
  const auto s = fixture::make_synthetic({});
  const auto b = fixture::build_library(s, ToyLmConfig{7});
  const std::vector<ScoringMode> knn = {ScoringMode::kKnnLm};
  EXPECT_THROW(Scorer(b.task, s.vocab, ScoringResources{b.lm.get(), nullptr}, knn), ConfigError);
  EXPECT_THROW(Scorer(b.task, s.vocab, ScoringResources{nullptr, nullptr}, knn), ConfigError);
  const ToyLbLm small(5, ToyLmConfig{7});
  const std::vector<ScoringMode> lm_only = {ScoringMode::kLm};
  EXPECT_THROW(Scorer(b.task, s.vocab, ScoringResources{&small, nullptr}, lm_only), ConfigError);
  const Datastore wrong_dim(3);
  const Retriever r(wrong_dim);
  EXPECT_THROW(Scorer(b.task, s.vocab, ScoringResources{b.lm.get(), &r}, knn), ConfigError);
}

TEST(Scorer, MultiTokenVerbalizerOnlyForLm) {
  const auto s = fixture::make_synthetic({});
  auto spec = s.spec;
  spec.verbalizer[0] = "great movie";
  const auto task = compile_task(spec, s.vocab);
  const ToyLbLm lm(s.vocab.size(), ToyLmConfig{7});
  const std::vector<ScoringMode> lm_only = {ScoringMode::kLm};
  const Scorer scorer(task, s.vocab, ScoringResources{&lm, nullptr}, lm_only);
  EXPECT_EQ(scorer.score(render_prompt(spec, s.test[0].text, s.vocab)).per_mode.size(), 1u);
  const std::vector<ScoringMode> fuzzy = {ScoringMode::kLmFuzzy};
  EXPECT_THROW(Scorer(task, s.vocab, ScoringResources{&lm, nullptr}, fuzzy), ConfigError);
}

TEST(Predict, SymmetricFixtureGivesFirstLabel) {
  const Vocab vocab({"<unk>", "x", "y", "z"});
  TaskSpec spec;
  spec.name = "sym";
  spec.labels = {"first", "second"};
  spec.verbalizer = {"x", "y"};
  spec.template_text = "{text}";
  spec.domain_string = "z";
  const auto task = compile_task(spec, vocab);
  // Empty prompt: the LM is uniform, so both labels tie.
  const ToyLbLm lm(4, ToyLmConfig{1});
  EXPECT_EQ(predict(task, Instance{"", 1}, ScoringMode::kLm, ScoringResources{&lm, nullptr}, vocab), 0u);
}

TEST(Lattice, ReductionsHoldPerInstance) {
  const auto s = fixture::make_synthetic({});
  const auto b = fixture::build_library(s, ToyLmConfig{7});
  const Retriever r(b.store);
  auto singles = b.task;
  singles.neighborhoods = singles.singletons;
  const std::vector<ScoringMode> modes = {ScoringMode::kLm, ScoringMode::kLmFuzzy, ScoringMode::kKnnLm,
                                          ScoringMode::kKnnFuzzy, ScoringMode::kKnnPrompt};
  RetrievalConfig zero;
  zero.lambda = 0.0;
  RetrievalConfig def;

  const auto base = score_all(s, b, &r, def, PmiPrior::kUniform, b.task, modes);
  const auto lam0_single = score_all(s, b, &r, zero, PmiPrior::kUniform, singles, modes);
  const auto lam0 = score_all(s, b, &r, zero, PmiPrior::kUniform, b.task, modes);
  const auto single = score_all(s, b, &r, def, PmiPrior::kUniform, singles, modes);
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    // (λ=0, singleton, uniform) ≡ LM
    EXPECT_EQ(lam0_single[i].predictions[4], base[i].predictions[0]) << i;
    // (λ=0, uniform) ≡ LM_FUZZY
    EXPECT_EQ(lam0[i].predictions[4], base[i].predictions[1]) << i;
    // (singleton, uniform) ≡ KNN_FUZZY with singletons ≡ KNN_LM
    EXPECT_EQ(single[i].predictions[4], single[i].predictions[3]) << i;
    EXPECT_EQ(single[i].predictions[3], base[i].predictions[2]) << i;
    for (std::size_t l = 0; l < 2; ++l) {
      EXPECT_NEAR(lam0_single[i].per_mode[4].scores[l], base[i].per_mode[0].scores[l], 1e-12);
      EXPECT_NEAR(lam0[i].per_mode[4].scores[l], base[i].per_mode[1].scores[l], 1e-12);
      EXPECT_NEAR(single[i].per_mode[4].scores[l], base[i].per_mode[2].scores[l], 1e-12);
    }
  }
}

TEST(Oracle, AllModesMatchStraightLinePipeline) {
  const auto s = fixture::make_synthetic({});
  const ToyLmConfig lmc{7};
  const auto b = fixture::build_library(s, lmc);
  ASSERT_EQ(b.store.size(), 200u);
  const Retriever r(b.store);
  for (auto [prior, oprior] : {std::pair{PmiPrior::kKnnLm, oracle::kPriorKnnLm},
                               std::pair{PmiPrior::kLm, oracle::kPriorLm},
                               std::pair{PmiPrior::kUniform, oracle::kPriorUniform}}) {
    auto in = fixture::oracle_input(s, lmc);
    in.prior = oprior;
    const auto want = oracle::run_pipeline(in);
    ASSERT_EQ(want.datastore_size, 200u);
    const auto got = score_all(s, b, &r, RetrievalConfig{}, prior, b.task, kAllModes);
    for (std::size_t i = 0; i < s.test.size(); ++i) {
      EXPECT_EQ(got[i].predictions, want.predictions[i]) << "instance " << i;
      EXPECT_EQ(*got[i].bare_covered, want.bare_covered[i]) << i;
      EXPECT_EQ(*got[i].fuzzy_covered, want.fuzzy_covered[i]) << i;
      for (std::size_t m = 0; m < 8; ++m) {
        for (std::size_t l = 0; l < 2; ++l) EXPECT_NEAR(got[i].per_mode[m].scores[l], want.scores[i][m][l], 1e-9);
      }
    }
  }
}
