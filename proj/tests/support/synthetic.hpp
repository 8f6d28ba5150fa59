#pragma once

// Deterministic sentiment-style benchmark. Class cue words drive retrieval;
// the bare verbalizers are rare as datastore values while their fuzzy
// neighbors are common, and the corpus leans positive so an uncalibrated
// kNN prior is skewed.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "knnprompt/core.hpp"
#include "knnprompt/datastore.hpp"
#include "knnprompt/lm_backend.hpp"
#include "knnprompt/tasks.hpp"
#include "knnprompt/verbalizer.hpp"
#include "oracles.hpp"

namespace fixture {

struct SyntheticParams {
  std::uint64_t seed = 7;
  std::size_t docs = 20;          // each document yields 10 entries
  std::size_t instances = 100;
  double positive_share = 0.8;    // corpus class balance
  std::size_t bare_every = 6;     // every n-th document of a class ends in the bare verbalizer
  double mixed_rate = 0.3;        // chance an instance carries one cue of the other class
};

struct Synthetic {
  knnprompt::Vocab vocab;
  knnprompt::TaskSpec spec;  // no resource paths; use vectors/lexicon below
  std::string corpus;        // blank-line separated documents
  std::vector<knnprompt::Instance> test;
  std::vector<knnprompt::Instance> train;
  knnprompt::WordVectors vectors;
  knnprompt::SynonymLexicon lexicon;
  std::string vectors_text;  // GloVe text form of `vectors`
  std::string lexicon_text;  // TSV form of `lexicon`
};

Synthetic make_synthetic(const SyntheticParams& params);

// Writes vocab.txt, corpus.txt, task.json (with resource paths), vectors.txt,
// lexicon.tsv, test.jsonl and train.jsonl into `dir`.
void write_synthetic(const Synthetic& s, const std::filesystem::path& dir);

// Oracle view of the fixture: plain word lists, neighborhoods expanded by
// hand from the raw vectors (cosine top-5) and the lexicon.
oracle::PipelineInput oracle_input(const Synthetic& s, const knnprompt::ToyLmConfig& lm);

// Library side: toy LM, datastore over the corpus, task compiled with the
// fixture's vectors and lexicon.
struct Built {
  std::unique_ptr<knnprompt::ToyLbLm> lm;
  knnprompt::Datastore store{1};
  knnprompt::CompiledTask task;
};

Built build_library(const Synthetic& s, const knnprompt::ToyLmConfig& lm);

}  // namespace fixture
