#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnprompt/ann_index.hpp"
#include "knnprompt/datastore.hpp"
#include "knnprompt/knn_scoring.hpp"
#include "knnprompt/lm_backend.hpp"
#include "knnprompt/pipeline.hpp"
#include "knnprompt/tasks.hpp"

namespace knnprompt {

// Runs fn(i) for i in [0, n) on `workers` threads; the first exception is
// rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

enum class BackendKind { kToy, kRecords };

struct BackendOptions {
  BackendKind kind = BackendKind::kToy;
  ToyLmConfig toy;
  std::filesystem::path records;
};

// Throws ConfigError if the backend's vocab size disagrees with `vocab`.
std::unique_ptr<LmBackend> make_backend(const BackendOptions& options, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Datastore builds

struct SourceReport {
  std::string name;
  std::uint64_t bytes = 0;
  std::uint64_t tokens = 0;
  std::uint64_t entries = 0;
};

struct CorpusBuild {
  Datastore store;
  std::vector<SourceReport> sources;
  BuildReport total;
};

// One datastore per corpus file (corpus id = position), merged in order.
CorpusBuild build_from_corpora(std::span<const std::filesystem::path> corpora, const Vocab& vocab,
                               const LmBackend& backend, bool provenance, std::size_t workers);

// Per-source token/entry table with a total row.
std::string format_build_table(const CorpusBuild& build);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalInputs {
  const CompiledTask* task = nullptr;
  const Vocab* vocab = nullptr;
  const LmBackend* backend = nullptr;
  const Retriever* retriever = nullptr;  // null: LM-only modes
  std::span<const Instance> test;
  std::span<const Instance> train;  // demo pool for few-shot runs
};

struct EvalOptions {
  std::vector<ScoringMode> modes{kAllModes.begin(), kAllModes.end()};
  RetrievalConfig cfg;
  PmiPrior prior = PmiPrior::kKnnLm;
  std::size_t shots = 0;
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
};

// One pass over the test set with one demo sample.
struct EvalRun {
  std::uint64_t seed = 0;
  std::vector<std::size_t> correct;                   // per mode
  std::vector<std::vector<std::size_t>> predictions;  // [instance][mode]
  std::size_t bare_covered = 0;
  std::size_t fuzzy_covered = 0;
  std::size_t skipped_pmi_terms = 0;
  double seconds = 0.0;
};

struct EvalReport {
  std::string task;
  EvalOptions options;
  std::string search;  // "none", "flat" or "ivf"
  std::size_t total = 0;
  std::vector<EvalRun> runs;

  double accuracy(std::size_t mode_index, std::size_t run) const;
  double mean_accuracy(std::size_t mode_index) const;
  double std_accuracy(std::size_t mode_index) const;  // sample std over runs; 0 for one run
  std::optional<double> bare_coverage_rate() const;
  std::optional<double> fuzzy_coverage_rate() const;

  // Stable key order. Wall-clock timings only appear with include_timings.
  nlohmann::ordered_json to_json(const CompiledTask& task, bool include_timings) const;
};

EvalReport run_eval(const EvalInputs& inputs, const EvalOptions& options);

struct CoverageReport {
  std::size_t instances = 0;
  std::size_t bare_hits = 0;
  std::size_t fuzzy_hits = 0;
  double bare_rate = 0.0;
  double fuzzy_rate = 0.0;

  nlohmann::ordered_json to_json() const;
};

// Zero-shot prompts only. Requires a retriever.
CoverageReport run_coverage(const EvalInputs& inputs, const RetrievalConfig& cfg, std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepGrid {
  std::vector<std::size_t> k;
  std::vector<double> temperature;
  std::vector<double> lambda;

  // Contains the default point (k=1024, t=3, lambda=0.3).
  static SweepGrid defaults();
  void validate() const;
};

// CSV with header `k,t,lambda,mode,accuracy`; rows ordered k, then t, then
// lambda, then mode. Accuracy is the mean over seeds.
std::string run_sweep(const SweepGrid& grid, const EvalInputs& inputs, const EvalOptions& base);

// Shortest round-trip decimal for a double.
std::string format_number(double value);

// ---------------------------------------------------------------------------
// Verbalizer expansion

// label -> sorted token strings of N(V(label)); valid as a task's `fuzzy` field.
nlohmann::ordered_json expand_verbalizers(const TaskSpec& spec, const Vocab& vocab, const WordVectors& vectors,
                                          const SynonymLexicon& lexicon);

}  // namespace knnprompt
