#include "knnprompt/harness.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <thread>

#include "knnprompt/errors.hpp"

namespace knnprompt {

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::unique_ptr<LmBackend> make_backend(const BackendOptions& options, const Vocab& vocab) {
  std::unique_ptr<LmBackend> backend;
  if (options.kind == BackendKind::kToy) {
    backend = std::make_unique<ToyLbLm>(vocab.size(), options.toy);
  } else {
    if (options.records.empty()) throw ConfigError("records backend needs --records");
    backend = std::make_unique<RecordLm>(RecordLm::load(options.records));
  }
  if (backend->vocab_size() != vocab.size()) {
    throw ConfigError("LM vocab size " + std::to_string(backend->vocab_size()) + " does not match vocab file (" +
                      std::to_string(vocab.size()) + " tokens)");
  }
  return backend;
}

// ---------------------------------------------------------------------------
// Datastore builds

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

CorpusBuild build_from_corpora(std::span<const std::filesystem::path> corpora, const Vocab& vocab,
                               const LmBackend& backend, bool provenance, std::size_t workers) {
  if (corpora.empty()) throw ConfigError("build-datastore: no corpus files");
  if (corpora.size() > 0xFFFF) throw ConfigError("build-datastore: too many corpus files");
  CorpusBuild out{Datastore(backend.dim()), {}, {}};
  std::vector<Datastore> parts;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < corpora.size(); ++i) {
    const std::string text = read_file(corpora[i]);
    const auto docs = split_documents(text, vocab);
    BuildOptions opts;
    opts.provenance = provenance;
    opts.corpus_id = static_cast<std::uint16_t>(i);
    opts.workers = workers;
    auto built = build_datastore(docs, backend, opts);
    out.sources.push_back(SourceReport{corpora[i].filename().string(), text.size(), built.report.tokens_ingested,
                                       built.report.entries_written});
    out.total.tokens_ingested += built.report.tokens_ingested;
    out.total.entries_written += built.report.entries_written;
    parts.push_back(std::move(built.store));
  }
  out.store = merge_datastores(parts);
  out.total.elapsed = std::chrono::steady_clock::now() - start;
  return out;
}

std::string format_build_table(const CorpusBuild& build) {
  std::size_t width = 6;
  for (const auto& s : build.sources) width = std::max(width, s.name.size());
  std::ostringstream out;
  auto row = [&](const std::string& name, const std::string& bytes, const std::string& tokens,
                 const std::string& entries) {
    out << std::left << std::setw(static_cast<int>(width)) << name << std::right << "  " << std::setw(12) << bytes
        << "  " << std::setw(12) << tokens << "  " << std::setw(12) << entries << '\n';
  };
  row("Corpus", "Bytes", "# Tokens", "# Entries");
  std::uint64_t bytes = 0;
  for (const auto& s : build.sources) {
    row(s.name, std::to_string(s.bytes), std::to_string(s.tokens), std::to_string(s.entries));
    bytes += s.bytes;
  }
  row("Total", std::to_string(bytes), std::to_string(build.total.tokens_ingested),
      std::to_string(build.total.entries_written));
  return out.str();
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

void check_inputs(const EvalInputs& in) {
  if (in.task == nullptr || in.vocab == nullptr || in.backend == nullptr) {
    throw ConfigError("evaluation: task, vocab and backend are required");
  }
}

ScoringResources resources_for(const EvalInputs& in, const EvalOptions& opt) {
  ScoringResources res;
  res.backend = in.backend;
  res.retriever = in.retriever;
  res.cfg = opt.cfg;
  res.prior = opt.prior;
  return res;
}

}  // namespace

EvalReport run_eval(const EvalInputs& inputs, const EvalOptions& options) {
  check_inputs(inputs);
  if (options.seeds.empty()) throw ConfigError("evaluation: at least one seed is required");
  if (options.shots > 0 && inputs.train.size() < options.shots) {
    throw ConfigError("evaluation: " + std::to_string(options.shots) + "-shot runs need at least that many " +
                      "training instances, have " + std::to_string(inputs.train.size()));
  }
  const Scorer scorer(*inputs.task, *inputs.vocab, resources_for(inputs, options), options.modes);

  EvalReport report;
  report.task = inputs.task->spec.name;
  report.options = options;
  report.search = inputs.retriever == nullptr ? "none" : (inputs.retriever->approximate() ? "ivf" : "flat");
  report.total = inputs.test.size();

  // Zero-shot prompts do not depend on the seed; evaluate them once.
  const std::vector<std::uint64_t> seeds =
      options.shots == 0 ? std::vector<std::uint64_t>{options.seeds.front()} : options.seeds;
  const std::size_t num_modes = options.modes.size();

  for (const auto seed : seeds) {
    const auto start = std::chrono::steady_clock::now();
    std::optional<DemoSet> demos;
    if (options.shots > 0) demos = sample_demos(inputs.train, options.shots, seed);

    std::vector<PromptScores> scored(inputs.test.size());
    parallel_for(inputs.test.size(), options.workers, [&](std::size_t i) {
      const auto prompt =
          render_prompt(inputs.task->spec, inputs.test[i].text, *inputs.vocab, demos ? &*demos : nullptr);
      scored[i] = scorer.score(prompt);
    });

    EvalRun run;
    run.seed = seed;
    run.correct.assign(num_modes, 0);
    for (std::size_t i = 0; i < scored.size(); ++i) {
      const auto& s = scored[i];
      for (std::size_t m = 0; m < num_modes; ++m) {
        if (s.predictions[m] == inputs.test[i].label) ++run.correct[m];
        run.skipped_pmi_terms += s.per_mode[m].skipped_tokens;
      }
      run.bare_covered += s.bare_covered.value_or(false) ? 1 : 0;
      run.fuzzy_covered += s.fuzzy_covered.value_or(false) ? 1 : 0;
      run.predictions.push_back(s.predictions);
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.runs.push_back(std::move(run));
  }
  return report;
}

double EvalReport::accuracy(std::size_t mode_index, std::size_t run) const {
  if (total == 0) return 0.0;
  return static_cast<double>(runs.at(run).correct.at(mode_index)) / static_cast<double>(total);
}

double EvalReport::mean_accuracy(std::size_t mode_index) const {
  double s = 0.0;
  for (std::size_t r = 0; r < runs.size(); ++r) s += accuracy(mode_index, r);
  return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

double EvalReport::std_accuracy(std::size_t mode_index) const {
  if (runs.size() < 2) return 0.0;
  const double mean = mean_accuracy(mode_index);
  double ss = 0.0;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const double d = accuracy(mode_index, r) - mean;
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(runs.size() - 1));
}

std::optional<double> EvalReport::bare_coverage_rate() const {
  if (search == "none" || total == 0) return std::nullopt;
  std::size_t hits = 0;
  for (const auto& r : runs) hits += r.bare_covered;
  return static_cast<double>(hits) / static_cast<double>(total * runs.size());
}

std::optional<double> EvalReport::fuzzy_coverage_rate() const {
  if (search == "none" || total == 0) return std::nullopt;
  std::size_t hits = 0;
  for (const auto& r : runs) hits += r.fuzzy_covered;
  return static_cast<double>(hits) / static_cast<double>(total * runs.size());
}

nlohmann::ordered_json EvalReport::to_json(const CompiledTask& compiled, bool include_timings) const {
  using nlohmann::ordered_json;
  const auto& labels = compiled.spec.labels;
  ordered_json j;
  j["task"] = task;
  j["labels"] = labels;
  j["instances"] = total;

  ordered_json cfg;
  ordered_json modes = ordered_json::array();
  for (auto m : options.modes) modes.push_back(std::string(mode_name(m)));
  cfg["modes"] = modes;
  cfg["k"] = options.cfg.k;
  cfg["temperature"] = options.cfg.temperature;
  cfg["lambda"] = options.cfg.lambda;
  cfg["nprobe"] = options.cfg.nprobe ? ordered_json(*options.cfg.nprobe) : ordered_json(nullptr);
  cfg["pmi_prior"] = std::string(prior_name(options.prior));
  cfg["search"] = search;
  cfg["shots"] = options.shots;
  ordered_json seeds = ordered_json::array();
  for (const auto& r : runs) seeds.push_back(r.seed);
  cfg["seeds"] = seeds;
  j["config"] = cfg;

  ordered_json results = ordered_json::array();
  for (std::size_t m = 0; m < options.modes.size(); ++m) {
    ordered_json row;
    row["mode"] = std::string(mode_name(options.modes[m]));
    row["accuracy"] = mean_accuracy(m);
    row["std"] = std_accuracy(m);
    ordered_json per_run = ordered_json::array();
    for (std::size_t r = 0; r < runs.size(); ++r) {
      ordered_json pr;
      pr["seed"] = runs[r].seed;
      pr["correct"] = runs[r].correct[m];
      pr["total"] = total;
      pr["accuracy"] = accuracy(m, r);
      per_run.push_back(pr);
    }
    row["runs"] = per_run;
    results.push_back(row);
  }
  j["results"] = results;

  if (const auto bare = bare_coverage_rate()) {
    ordered_json cov;
    cov["bare_rate"] = *bare;
    cov["fuzzy_rate"] = *fuzzy_coverage_rate();
    j["coverage"] = cov;
  } else {
    j["coverage"] = nullptr;
  }

  std::size_t skipped = 0;
  for (const auto& r : runs) skipped += r.skipped_pmi_terms;
  j["warnings"] = ordered_json{{"pmi_skipped_terms", skipped}};

  ordered_json preds = ordered_json::array();
  for (const auto& r : runs) {
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
      ordered_json p;
      p["seed"] = r.seed;
      p["index"] = i;
      ordered_json by_mode;
      for (std::size_t m = 0; m < options.modes.size(); ++m) {
        by_mode[std::string(mode_name(options.modes[m]))] = labels[r.predictions[i][m]];
      }
      p["predicted"] = by_mode;
      preds.push_back(p);
    }
  }
  j["predictions"] = preds;

  if (include_timings) {
    ordered_json t = ordered_json::array();
    for (const auto& r : runs) t.push_back(ordered_json{{"seed", r.seed}, {"seconds", r.seconds}});
    j["timings"] = t;
  }
  return j;
}

CoverageReport run_coverage(const EvalInputs& inputs, const RetrievalConfig& cfg, std::size_t workers) {
  check_inputs(inputs);
  if (inputs.retriever == nullptr) throw ConfigError("coverage: a datastore is required");
  cfg.validate();
  if (!inputs.task->single_token()) throw ConfigError("coverage: verbalizers must be single tokens");

  std::vector<char> bare(inputs.test.size()), fuzzy(inputs.test.size());
  parallel_for(inputs.test.size(), workers, [&](std::size_t i) {
    const auto prompt = render_prompt(inputs.task->spec, inputs.test[i].text, *inputs.vocab);
    const auto neighbors = inputs.retriever->search(inputs.backend->encode(prompt), cfg.k);
    const auto p_knn = knn_distribution(neighbors, cfg.temperature);
    bare[i] = coverage(p_knn, inputs.task->singletons);
    fuzzy[i] = coverage(p_knn, inputs.task->neighborhoods);
  });
  CoverageReport r;
  r.instances = inputs.test.size();
  for (std::size_t i = 0; i < r.instances; ++i) {
    r.bare_hits += bare[i] ? 1 : 0;
    r.fuzzy_hits += fuzzy[i] ? 1 : 0;
  }
  if (r.instances > 0) {
    r.bare_rate = static_cast<double>(r.bare_hits) / static_cast<double>(r.instances);
    r.fuzzy_rate = static_cast<double>(r.fuzzy_hits) / static_cast<double>(r.instances);
  }
  if (r.fuzzy_hits < r.bare_hits) throw InvariantError("coverage: fuzzy coverage below bare coverage");
  return r;
}

nlohmann::ordered_json CoverageReport::to_json() const {
  nlohmann::ordered_json j;
  j["instances"] = instances;
  j["bare_hits"] = bare_hits;
  j["fuzzy_hits"] = fuzzy_hits;
  j["bare_rate"] = bare_rate;
  j["fuzzy_rate"] = fuzzy_rate;
  return j;
}

// ---------------------------------------------------------------------------
// Sweeps

SweepGrid SweepGrid::defaults() {
  return SweepGrid{{64, 256, 1024}, {1.0, 3.0, 10.0}, {0.1, 0.3, 0.5}};
}

void SweepGrid::validate() const {
  if (k.empty() || temperature.empty() || lambda.empty()) throw ConfigError("sweep: every grid axis needs a value");
}

std::string format_number(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw InvariantError("format_number failed");
  return std::string(buf, ptr);
}

std::string run_sweep(const SweepGrid& grid, const EvalInputs& inputs, const EvalOptions& base) {
  grid.validate();
  std::string csv = "k,t,lambda,mode,accuracy\n";
  for (const auto k : grid.k) {
    for (const auto t : grid.temperature) {
      for (const auto lambda : grid.lambda) {
        EvalOptions opt = base;
        opt.cfg.k = k;
        opt.cfg.temperature = t;
        opt.cfg.lambda = lambda;
        const auto report = run_eval(inputs, opt);
        for (std::size_t m = 0; m < opt.modes.size(); ++m) {
          csv += std::to_string(k) + ',' + format_number(t) + ',' + format_number(lambda) + ',' +
                 std::string(mode_name(opt.modes[m])) + ',' + format_number(report.mean_accuracy(m)) + '\n';
        }
      }
    }
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Verbalizer expansion

nlohmann::ordered_json expand_verbalizers(const TaskSpec& spec, const Vocab& vocab, const WordVectors& vectors,
                                          const SynonymLexicon& lexicon) {
  spec.validate();
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < spec.labels.size(); ++i) {
    const auto n = build_neighborhood(vectors, lexicon, spec.verbalizer[i], vocab);
    std::vector<std::string> words;
    for (TokenId t : n) words.push_back(vocab.token(t));
    std::sort(words.begin(), words.end());
    out[spec.labels[i]] = words;
  }
  return out;
}

}  // namespace knnprompt
