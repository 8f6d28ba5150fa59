#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <sstream>

#include "knnprompt/errors.hpp"
#include "knnprompt/harness.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace knnprompt;

namespace {

struct Env {
  fixture::Synthetic s = fixture::make_synthetic({});
  fixture::Built b = fixture::build_library(s, ToyLmConfig{7});
  Retriever r{b.store};

  EvalInputs inputs(const Retriever* retriever) const {
    return EvalInputs{&b.task, &s.vocab, b.lm.get(), retriever, s.test, s.train};
  }
};

const Env& env() {
  static const Env e;
  return e;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (std::size_t workers : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(101);
    parallel_for(hits.size(), workers, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) {
                 if (i == 7) throw DataError("boom");
               }),
               DataError);
}

TEST(Backend, FactoryChecksVocab) {
  const auto& e = env();
  BackendOptions opt;
  opt.toy.seed = 7;
  EXPECT_EQ(make_backend(opt, e.s.vocab)->vocab_size(), e.s.vocab.size());
  opt.kind = BackendKind::kRecords;
  EXPECT_THROW(make_backend(opt, e.s.vocab), ConfigError);
  testutil::TempDir dir;
  write_records(dir / "r.nnpr", 2, 3, {});
  opt.records = dir / "r.nnpr";
  EXPECT_THROW(make_backend(opt, e.s.vocab), ConfigError);
}

TEST(BuildCorpora, TwoFilesEqualMergeOfPerFileBuilds) {
  const auto& e = env();
  testutil::TempDir dir;
  const std::string a = "the movie was dull\n\nit was great", b = "the plot was funny and moving";
  testutil::write_file(dir / "a.txt", a);
  testutil::write_file(dir / "b.txt", b);
  const std::vector<std::filesystem::path> files = {dir / "a.txt", dir / "b.txt"};
  const auto build = build_from_corpora(files, e.s.vocab, *e.b.lm, true, 2);

  std::vector<Datastore> parts;
  for (const auto& text : {a, b}) parts.push_back(build_datastore(split_documents(text, e.s.vocab), *e.b.lm).store);
  const auto merged = merge_datastores(parts);
  EXPECT_TRUE(std::ranges::equal(build.store.keys(), merged.keys()));
  EXPECT_TRUE(std::ranges::equal(build.store.values(), merged.values()));
  ASSERT_TRUE(build.store.has_provenance());
  EXPECT_EQ(build.store.provenance().back().corpus_id, 1u);

  ASSERT_EQ(build.sources.size(), 2u);
  EXPECT_EQ(build.sources[0].tokens, 7u);
  EXPECT_EQ(build.sources[0].entries, 5u);
  EXPECT_EQ(build.sources[1].tokens, 6u);
  EXPECT_EQ(build.sources[1].bytes, b.size());
  EXPECT_EQ(build.total.tokens_ingested, 13u);

  const auto table = lines(format_build_table(build));
  ASSERT_EQ(table.size(), 4u);
  EXPECT_NE(table[0].find("# Tokens"), std::string::npos);
  EXPECT_EQ(table[3].rfind("Total", 0), 0u);
  EXPECT_NE(table[3].find(" 13 "), std::string::npos);
}

TEST(BuildCorpora, RebuildIsByteIdentical) {
  const auto& e = env();
  testutil::TempDir dir;
  testutil::write_file(dir / "c.txt", e.s.corpus);
  const std::vector<std::filesystem::path> files = {dir / "c.txt"};
  save_datastore(build_from_corpora(files, e.s.vocab, *e.b.lm, false, 1).store, dir / "1.knnd");
  save_datastore(build_from_corpora(files, e.s.vocab, *e.b.lm, false, 3).store, dir / "2.knnd");
  EXPECT_EQ(oracle::file_bytes((dir / "1.knnd").string()), oracle::file_bytes((dir / "2.knnd").string()));
  const std::vector<std::filesystem::path> none;
  EXPECT_THROW(build_from_corpora(none, e.s.vocab, *e.b.lm, false, 1), ConfigError);
}

TEST(Eval, AccuraciesEqualOracle) {
  const auto& e = env();
  const auto report = run_eval(e.inputs(&e.r), EvalOptions{});
  auto in = fixture::oracle_input(e.s, ToyLmConfig{7});
  const auto want = oracle::run_pipeline(in);
  ASSERT_EQ(report.runs.size(), 1u);
  for (std::size_t m = 0; m < 8; ++m) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < e.s.test.size(); ++i) correct += want.predictions[i][m] == e.s.test[i].label;
    EXPECT_EQ(report.runs[0].correct[m], correct) << mode_name(kAllModes[m]);
    EXPECT_DOUBLE_EQ(report.mean_accuracy(m), double(correct) / 100.0);
    EXPECT_EQ(report.std_accuracy(m), 0.0);
  }
  std::size_t bare = 0, fuzzy = 0;
  for (std::size_t i = 0; i < 100; ++i) bare += want.bare_covered[i], fuzzy += want.fuzzy_covered[i];
  EXPECT_DOUBLE_EQ(*report.bare_coverage_rate(), bare / 100.0);
  EXPECT_DOUBLE_EQ(*report.fuzzy_coverage_rate(), fuzzy / 100.0);
}

TEST(Eval, TableTwoShapeAndJsonOrder) {
  const auto& e = env();
  EvalOptions opt;
  opt.modes = {ScoringMode::kLm, ScoringMode::kLmPmi, ScoringMode::kKnnLm, ScoringMode::kKnnPrompt};
  const auto j = run_eval(e.inputs(&e.r), opt).to_json(e.b.task, false);
  std::vector<std::string> keys;
  for (const auto& [k, _] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"task", "labels", "instances", "config", "results", "coverage",
                                            "warnings", "predictions"}));
  ASSERT_EQ(j["results"].size(), 4u);
  EXPECT_EQ(j["results"][3]["mode"], "KNN_PROMPT");
  EXPECT_EQ(j["config"]["search"], "flat");
  EXPECT_TRUE(j["config"]["nprobe"].is_null());
  EXPECT_FALSE(j.contains("timings"));
  EXPECT_TRUE(run_eval(e.inputs(&e.r), opt).to_json(e.b.task, true).contains("timings"));
}

TEST(Eval, MissingDatastoreIsConfigError) {
  const auto& e = env();
  EXPECT_THROW(run_eval(e.inputs(nullptr), EvalOptions{}), ConfigError);
  EvalOptions lm_only;
  lm_only.modes = {ScoringMode::kLm, ScoringMode::kLmFuzzyPmi};
  const auto report = run_eval(e.inputs(nullptr), lm_only);
  EXPECT_EQ(report.search, "none");
  EXPECT_FALSE(report.bare_coverage_rate().has_value());
}

TEST(Eval, FewShotMeanAndStd) {
  const auto& e = env();
  EvalOptions opt;
  opt.modes = {ScoringMode::kLm, ScoringMode::kKnnPrompt};
  opt.shots = 4;
  opt.seeds = {1, 2, 3, 4};
  const auto report = run_eval(e.inputs(&e.r), opt);
  ASSERT_EQ(report.runs.size(), 4u);
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<double> acc;
    for (std::size_t r = 0; r < 4; ++r) {
      // Each run re-scored by hand with its own demo sample.
      const auto demos = sample_demos(e.s.train, 4, opt.seeds[r]);
      std::size_t correct = 0;
      for (const auto& x : e.s.test) {
        correct += predict(e.b.task, x, opt.modes[m], ScoringResources{e.b.lm.get(), &e.r, RetrievalConfig{}, PmiPrior::kKnnLm}, e.s.vocab, &demos) ==
                   x.label;
      }
      acc.push_back(correct / 100.0);
      EXPECT_DOUBLE_EQ(report.accuracy(m, r), acc.back());
    }
    const double mean = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
    double ss = 0.0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    EXPECT_NEAR(report.mean_accuracy(m), mean, 1e-12);
    EXPECT_NEAR(report.std_accuracy(m), std::sqrt(ss / 3.0), 1e-12);
  }
  opt.shots = 17;
  EXPECT_THROW(run_eval(e.inputs(&e.r), opt), ConfigError);
}

TEST(Eval, WorkerCountDoesNotChangeReport) {
  const auto& e = env();
  EvalOptions serial, parallel;
  parallel.workers = 8;
  EXPECT_EQ(run_eval(e.inputs(&e.r), serial).to_json(e.b.task, false).dump(),
            run_eval(e.inputs(&e.r), parallel).to_json(e.b.task, false).dump());
}

TEST(Eval, SplitStoresEqualMergedStoreUnderFlatSearch) {
  const auto& e = env();
  // Half the corpus in each store.
  const auto docs = split_documents(e.s.corpus, e.s.vocab);
  const std::size_t half = docs.size() / 2;
  const std::vector<Datastore> parts = {
      build_datastore(std::span(docs).first(half), *e.b.lm).store,
      build_datastore(std::span(docs).subspan(half), *e.b.lm).store};
  const auto merged = merge_datastores(parts);
  const Retriever r(merged);
  EXPECT_EQ(run_eval(e.inputs(&r), EvalOptions{}).to_json(e.b.task, false).dump(),
            run_eval(e.inputs(&e.r), EvalOptions{}).to_json(e.b.task, false).dump());
}

TEST(Coverage, EmptyStoreAndVerbalizerOnlyStore) {
  const auto& e = env();
  const Datastore empty(16);
  const Retriever r0(empty);
  const auto c0 = run_coverage(e.inputs(&r0), RetrievalConfig{});
  EXPECT_EQ(c0.bare_rate, 0.0);
  EXPECT_EQ(c0.fuzzy_rate, 0.0);

  std::vector<float> keys;
  std::vector<TokenId> values;
  for (std::size_t i = 0; i < e.b.store.size(); ++i) {
    keys.insert(keys.end(), e.b.store.key(i).begin(), e.b.store.key(i).end());
    values.push_back(e.b.task.verbalizer_ids[i % 2][0]);
  }
  const Datastore verbs(16, keys, values);
  const Retriever r1(verbs);
  const auto c1 = run_coverage(e.inputs(&r1), RetrievalConfig{});
  EXPECT_EQ(c1.bare_rate, 1.0);
  EXPECT_EQ(c1.fuzzy_rate, 1.0);
  EXPECT_THROW(run_coverage(e.inputs(nullptr), RetrievalConfig{}), ConfigError);
}

TEST(Coverage, SyntheticRatesEqualEnumeration) {
  const auto& e = env();
  for (std::size_t k : {1u, 5u, 30u, 1024u}) {
    RetrievalConfig cfg;
    cfg.k = k;
    const auto c = run_coverage(e.inputs(&e.r), cfg);
    auto in = fixture::oracle_input(e.s, ToyLmConfig{7});
    in.k = k;
    const auto want = oracle::run_pipeline(in);
    std::size_t bare = 0, fuzzy = 0;
    for (std::size_t i = 0; i < 100; ++i) bare += want.bare_covered[i], fuzzy += want.fuzzy_covered[i];
    EXPECT_EQ(c.bare_hits, bare) << k;
    EXPECT_EQ(c.fuzzy_hits, fuzzy) << k;
    EXPECT_GE(c.fuzzy_rate, c.bare_rate);
  }
}

TEST(Sweep, LambdaZeroRowIsLmAccuracy) {
  const auto& e = env();
  EvalOptions base;
  base.modes = {ScoringMode::kKnnLm};
  const auto csv = lines(run_sweep(SweepGrid{{1}, {1.0}, {0.0}}, e.inputs(&e.r), base));
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[0], "k,t,lambda,mode,accuracy");
  EvalOptions lm;
  lm.modes = {ScoringMode::kLm};
  const double acc = run_eval(e.inputs(&e.r), lm).mean_accuracy(0);
  EXPECT_EQ(csv[1], "1,1,0,KNN_LM," + format_number(acc));
}

TEST(Sweep, CardinalityOrderAndDefaults) {
  const auto& e = env();
  EvalOptions base;
  base.modes = {ScoringMode::kKnnLm, ScoringMode::kKnnPrompt};
  const auto csv = lines(run_sweep(SweepGrid{{4, 16}, {1.0, 3.0}, {0.2, 0.5}}, e.inputs(&e.r), base));
  ASSERT_EQ(csv.size(), 1u + 8u * 2u);
  EXPECT_EQ(csv[1].rfind("4,1,0.2,KNN_LM,", 0), 0u);
  EXPECT_EQ(csv[3].rfind("4,1,0.5,KNN_LM,", 0), 0u);
  EXPECT_EQ(csv[5].rfind("4,3,0.2,", 0), 0u);
  EXPECT_EQ(csv[16].rfind("16,3,0.5,KNN_PROMPT,", 0), 0u);

  const auto d = SweepGrid::defaults();
  EXPECT_NE(std::find(d.k.begin(), d.k.end(), 1024u), d.k.end());
  EXPECT_NE(std::find(d.temperature.begin(), d.temperature.end(), 3.0), d.temperature.end());
  EXPECT_NE(std::find(d.lambda.begin(), d.lambda.end(), 0.3), d.lambda.end());
  EXPECT_THROW((SweepGrid{{}, {1.0}, {0.1}}).validate(), ConfigError);
}

TEST(FormatNumber, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.3), "0.3");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(0.57), "0.57");
  EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Expand, FixtureHandSetsAndRoundTrip) {
  const auto& e = env();
  const auto j = expand_verbalizers(e.s.spec, e.s.vocab, e.s.vectors, e.s.lexicon);
  EXPECT_EQ(j["positive"], (std::vector<std::string>{"excellent", "fantastic", "great", "superb", "wonderful"}));
  EXPECT_EQ(j["negative"], (std::vector<std::string>{"awful", "bad", "dreadful", "horrible", "terrible"}));

  auto spec_json = task_to_json(e.s.spec);
  spec_json["fuzzy"] = j;
  const auto spec = parse_task(nlohmann::json::parse(spec_json.dump()));
  const auto task = compile_task(spec, e.s.vocab);
  EXPECT_EQ(task.neighborhoods, e.b.task.neighborhoods);

  const auto id = expand_verbalizers(e.s.spec, e.s.vocab, {}, {});
  EXPECT_EQ(id["positive"], std::vector<std::string>{"great"});
  EXPECT_EQ(id["negative"], std::vector<std::string>{"terrible"});
}
