// knnprompt command-line driver.
//
//   knnprompt build-vocab        --corpus a.txt b.txt --max-size 5000 --out vocab.txt
//   knnprompt build-datastore    --vocab v.txt --corpus a.txt b.txt --out store.knnd
//   knnprompt build-index        --datastore store.knnd --nlist 16 --out store.knni
//   knnprompt eval               --task t.json --data test.jsonl --vocab v.txt --datastore store.knnd
//   knnprompt sweep              ... --grid-k 16 64 --grid-t 1 3 --grid-lambda 0 0.3
//   knnprompt coverage           --task t.json --data test.jsonl --vocab v.txt --datastore store.knnd
//   knnprompt expand-verbalizer  --task t.json --vocab v.txt
//   knnprompt export-records     --vocab v.txt --corpus a.txt --out lm.nnpr
//
// Any long option may also come from `--config file.json` (keys are option
// names without dashes); explicit flags win.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnprompt/errors.hpp"
#include "knnprompt/harness.hpp"

namespace kp = knnprompt;

namespace {

struct BackendArgs {
  std::string vocab;
  std::string kind = "toy";
  std::string records;
  kp::ToyLmConfig toy;
};

struct RetrievalArgs {
  std::vector<std::string> datastores;
  std::string index;
  std::optional<std::size_t> nprobe;
  kp::RetrievalConfig cfg;
};

struct TaskArgs {
  std::string task;
  std::string data;
  std::string train;
  std::vector<std::string> modes;
  std::string prior = "knnlm";
  std::size_t shots = 0;
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
  bool timings = false;
};

void add_backend(CLI::App* cmd, BackendArgs& a) {
  cmd->add_option("--vocab", a.vocab, "Vocab file, one token per line (line 0: <unk>)");
  cmd->add_option("--backend", a.kind, "LM backend")->check(CLI::IsMember({"toy", "records"}))->capture_default_str();
  cmd->add_option("--records", a.records, "Record file for --backend records");
  cmd->add_option("--lm-seed", a.toy.seed, "Toy LM seed")->capture_default_str();
  cmd->add_option("--lm-dim", a.toy.dim, "Toy LM embedding dim")->capture_default_str();
  cmd->add_option("--lm-window", a.toy.window, "Toy LM context window")->capture_default_str();
  cmd->add_option("--lm-inv-temp", a.toy.inv_temperature, "Toy LM logit scale")->capture_default_str();
}

void add_retrieval(CLI::App* cmd, RetrievalArgs& a) {
  cmd->add_option("--datastore", a.datastores, "Datastore file(s); several are merged in order");
  cmd->add_option("--index", a.index, "IVF index for the (merged) datastore");
  cmd->add_option("--nprobe", a.nprobe, "IVF cells to probe (default 1)");
  cmd->add_option("--k", a.cfg.k, "Neighbors to retrieve")->capture_default_str();
  cmd->add_option("--temperature", a.cfg.temperature, "kNN softmax temperature")->capture_default_str();
  cmd->add_option("--lambda", a.cfg.lambda, "kNN interpolation weight")->capture_default_str();
}

void add_task(CLI::App* cmd, TaskArgs& a, bool with_modes) {
  cmd->add_option("--task", a.task, "Task spec JSON");
  cmd->add_option("--data", a.data, "Test set (JSONL)");
  cmd->add_option("--workers", a.workers, "Worker threads")->capture_default_str();
  if (!with_modes) return;
  cmd->add_option("--train", a.train, "Demonstration pool (JSONL) for --shots");
  cmd->add_option("--modes", a.modes, "Scoring modes (default: all eight)")->delimiter(',');
  cmd->add_option("--pmi-prior", a.prior, "PMI denominator model")
      ->check(CLI::IsMember({"lm", "knnlm", "uniform"}))
      ->capture_default_str();
  cmd->add_option("--shots", a.shots, "Demonstrations per prompt")->capture_default_str();
  cmd->add_option("--seeds,--seed", a.seeds, "Demo sampling seeds")->envname("NNPROMPT_SEED");
  cmd->add_flag("--timings", a.timings, "Include wall-clock timings in the report");
}

void require(bool cond, const std::string& what) {
  if (!cond) throw kp::ConfigError(what);
}

// Appends `--key value...` for config keys not already given on the command line.
std::vector<std::string> apply_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;

  std::ifstream in(path);
  if (!in) throw kp::ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw kp::ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw kp::ConfigError(path + ": expected a JSON object");

  auto given = [&](const std::string& flag) {
    for (const auto& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  auto scalar = [&](const std::string& key, const nlohmann::json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
    if (v.is_number_float()) return kp::format_number(v.get<double>());
    throw kp::ConfigError(path + ": unsupported value for '" + key + "'");
  };
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
      continue;
    }
    if (value.is_null()) continue;
    args.push_back(flag);
    if (value.is_array()) {
      for (const auto& v : value) args.push_back(scalar(key, v));
    } else {
      args.push_back(scalar(key, value));
    }
  }
  return args;
}

std::unique_ptr<kp::LmBackend> open_backend(const BackendArgs& a, const kp::Vocab& vocab) {
  kp::BackendOptions opts;
  opts.kind = a.kind == "records" ? kp::BackendKind::kRecords : kp::BackendKind::kToy;
  opts.toy = a.toy;
  opts.records = a.records;
  return kp::make_backend(opts, vocab);
}

kp::Vocab open_vocab(const BackendArgs& a) {
  require(!a.vocab.empty(), "--vocab is required");
  return kp::Vocab::load(a.vocab);
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw kp::DataError("cannot write " + out_path);
  out << text;
  if (!out) throw kp::DataError("write failed: " + out_path);
}

// Loaded retrieval resources; null retriever when no datastore was given.
struct Retrieval {
  std::optional<kp::Datastore> store;
  std::optional<kp::IvfIndex> index;
  std::optional<kp::Retriever> retriever;

  const kp::Retriever* get() const { return retriever ? &*retriever : nullptr; }
};

void open_retrieval(const RetrievalArgs& a, const kp::Vocab& vocab, Retrieval& r) {
  if (a.datastores.empty()) {
    require(a.index.empty(), "--index needs --datastore");
    return;
  }
  std::vector<kp::Datastore> parts;
  for (const auto& p : a.datastores) parts.push_back(kp::load_datastore(p));
  r.store = parts.size() == 1 ? std::move(parts.front()) : kp::merge_datastores(parts);
  r.store->validate(vocab.size());
  if (a.index.empty()) {
    require(!a.nprobe, "--nprobe needs --index");
    r.retriever.emplace(*r.store);
    return;
  }
  r.index = kp::IvfIndex::load(a.index);
  r.retriever.emplace(*r.store, *r.index, a.nprobe.value_or(1));
}

std::vector<kp::ScoringMode> parse_modes(const std::vector<std::string>& names) {
  if (names.empty()) return {kp::kAllModes.begin(), kp::kAllModes.end()};
  std::vector<kp::ScoringMode> out;
  for (const auto& n : names) out.push_back(kp::parse_mode(n));
  return out;
}

// Everything eval/sweep/coverage share.
struct EvalSetup {
  kp::Vocab vocab;
  std::unique_ptr<kp::LmBackend> backend;
  Retrieval retrieval;
  std::optional<kp::CompiledTask> task;
  std::vector<kp::Instance> test;
  std::vector<kp::Instance> train;
  kp::EvalOptions options;

  kp::EvalInputs inputs() const {
    return kp::EvalInputs{&*task, &vocab, backend.get(), retrieval.get(), test, train};
  }
};

void open_eval(const BackendArgs& b, const RetrievalArgs& r, const TaskArgs& t, EvalSetup& s) {
  require(!t.task.empty(), "--task is required");
  require(!t.data.empty(), "--data is required");
  s.vocab = open_vocab(b);
  s.options.modes = parse_modes(t.modes);
  s.options.cfg = r.cfg;
  s.options.cfg.nprobe = r.nprobe;
  s.options.cfg.validate();
  s.options.prior = kp::parse_prior(t.prior);
  s.options.shots = t.shots;
  s.options.seeds = t.seeds;
  s.options.workers = t.workers;
  require(t.workers >= 1, "--workers must be at least 1");
  require(t.shots == 0 || !t.train.empty(), "--shots needs --train");

  auto spec = kp::load_task(t.task);
  s.task = kp::compile_task(std::move(spec), s.vocab);
  s.backend = open_backend(b, s.vocab);
  open_retrieval(r, s.vocab, s.retrieval);
  s.test = kp::load_dataset(t.data, s.task->spec);
  if (!t.train.empty()) s.train = kp::load_dataset(t.train, s.task->spec);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw kp::DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(int argc, char** argv) {
  CLI::App app{"kNN-augmented zero-shot prompting engine", "knnprompt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "knnprompt 1.0");

  // build-vocab
  std::vector<std::string> bv_corpus;
  std::size_t bv_max = 50000;
  std::string bv_out;
  auto* bv = app.add_subcommand("build-vocab", "Build a frequency-ranked vocab from corpus files");
  bv->add_option("--corpus", bv_corpus, "Corpus text files")->required();
  bv->add_option("--max-size", bv_max, "Vocab size including <unk>")->capture_default_str();
  bv->add_option("--out", bv_out, "Output vocab file")->required();

  // build-datastore
  BackendArgs bd_backend;
  std::vector<std::string> bd_corpus;
  std::string bd_out;
  bool bd_provenance = false;
  std::size_t bd_workers = 1;
  auto* bd = app.add_subcommand("build-datastore", "Run the LM over corpora and write a datastore");
  add_backend(bd, bd_backend);
  bd->add_option("--corpus", bd_corpus, "Corpus text files (blank line separates documents)");
  bd->add_option("--out", bd_out, "Output datastore file");
  bd->add_flag("--provenance", bd_provenance, "Record (corpus id, token offset) per entry");
  bd->add_option("--workers", bd_workers, "Worker threads")->capture_default_str();

  // build-index
  std::string bi_store, bi_out;
  kp::IvfParams bi_params;
  auto* bi = app.add_subcommand("build-index", "Cluster a datastore into an IVF index");
  bi->add_option("--datastore", bi_store, "Datastore file");
  bi->add_option("--nlist", bi_params.nlist, "Number of k-means cells")->capture_default_str();
  bi->add_option("--kmeans-seed", bi_params.seed, "Seed for initial centroids")->capture_default_str();
  bi->add_option("--kmeans-iters", bi_params.kmeans_iters, "Lloyd iterations")->capture_default_str();
  bi->add_option("--workers", bi_params.workers, "Worker threads")->capture_default_str();
  bi->add_option("--out", bi_out, "Output index file");

  // eval
  BackendArgs ev_backend;
  RetrievalArgs ev_retrieval;
  TaskArgs ev_task;
  std::string ev_out;
  auto* ev = app.add_subcommand("eval", "Evaluate a task under the requested scoring modes");
  add_backend(ev, ev_backend);
  add_retrieval(ev, ev_retrieval);
  add_task(ev, ev_task, true);
  ev->add_option("--out", ev_out, "Report path (default: stdout)");

  // sweep
  BackendArgs sw_backend;
  RetrievalArgs sw_retrieval;
  TaskArgs sw_task;
  std::string sw_out;
  kp::SweepGrid grid = kp::SweepGrid::defaults();
  auto* sw = app.add_subcommand("sweep", "Accuracy over a (k, t, lambda) grid as CSV");
  add_backend(sw, sw_backend);
  add_retrieval(sw, sw_retrieval);
  add_task(sw, sw_task, true);
  sw->add_option("--grid-k", grid.k, "k values");
  sw->add_option("--grid-t", grid.temperature, "Temperature values");
  sw->add_option("--grid-lambda", grid.lambda, "Lambda values");
  sw->add_option("--out", sw_out, "CSV path (default: stdout)");

  // coverage
  BackendArgs cv_backend;
  RetrievalArgs cv_retrieval;
  TaskArgs cv_task;
  std::string cv_out;
  auto* cv = app.add_subcommand("coverage", "Bare and fuzzy verbalizer coverage of the kNN support");
  add_backend(cv, cv_backend);
  add_retrieval(cv, cv_retrieval);
  add_task(cv, cv_task, false);
  cv->add_option("--out", cv_out, "Report path (default: stdout)");

  // expand-verbalizer
  std::string xv_task, xv_vocab, xv_vectors, xv_lexicon, xv_out;
  auto* xv = app.add_subcommand("expand-verbalizer", "Write fuzzy neighborhoods as a task `fuzzy` object");
  xv->add_option("--task", xv_task, "Task spec JSON");
  xv->add_option("--vocab", xv_vocab, "Vocab file");
  xv->add_option("--vectors", xv_vectors, "Word vectors (default: the task's word_vectors_path)");
  xv->add_option("--lexicon", xv_lexicon, "Synonym TSV (default: the task's synonym_lexicon_path)");
  xv->add_option("--out", xv_out, "Output JSON (default: stdout)");

  // export-records
  BackendArgs er_backend;
  std::string er_contexts, er_out;
  std::vector<std::string> er_corpus;
  TaskArgs er_task;
  auto* er = app.add_subcommand("export-records", "Dump toy LM outputs to a record file");
  add_backend(er, er_backend);
  er->add_option("--contexts", er_contexts, "Text file, one context per line");
  er->add_option("--corpus", er_corpus, "Corpus files; every non-empty document prefix is exported");
  er->add_option("--task", er_task.task, "Task spec; exports every test prompt plus the domain prompt");
  er->add_option("--data", er_task.data, "Test set for --task");
  er->add_option("--train", er_task.train, "Demonstration pool for --shots");
  er->add_option("--shots", er_task.shots, "Demonstrations per prompt")->capture_default_str();
  er->add_option("--seeds,--seed", er_task.seeds, "Demo sampling seeds")->envname("NNPROMPT_SEED");
  er->add_option("--out", er_out, "Output record file");

  auto args = apply_config(std::vector<std::string>(argv + 1, argv + argc));
  std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (bv->parsed()) {
    kp::VocabBuilder builder;
    for (const auto& p : bv_corpus) builder.add_text(read_text(p));
    const auto vocab = builder.finish(bv_max);
    vocab.save(bv_out);
    std::cerr << "wrote " << vocab.size() << " tokens to " << bv_out << '\n';
    return 0;
  }

  if (bd->parsed()) {
    require(!bd_corpus.empty(), "--corpus is required");
    require(!bd_out.empty(), "--out is required");
    require(bd_workers >= 1, "--workers must be at least 1");
    const auto vocab = open_vocab(bd_backend);
    const auto backend = open_backend(bd_backend, vocab);
    std::vector<std::filesystem::path> paths(bd_corpus.begin(), bd_corpus.end());
    const auto build = kp::build_from_corpora(paths, vocab, *backend, bd_provenance, bd_workers);
    kp::save_datastore(build.store, bd_out);
    std::cout << kp::format_build_table(build);
    return 0;
  }

  if (bi->parsed()) {
    require(!bi_store.empty(), "--datastore is required");
    require(!bi_out.empty(), "--out is required");
    const auto store = kp::load_datastore(bi_store);
    const auto index = kp::ivf_build(store, bi_params);
    index.save(bi_out);
    std::cerr << "indexed " << store.size() << " entries into " << index.nlist() << " cells\n";
    return 0;
  }

  if (ev->parsed()) {
    EvalSetup s;
    open_eval(ev_backend, ev_retrieval, ev_task, s);
    const auto report = kp::run_eval(s.inputs(), s.options);
    emit(ev_out, report.to_json(*s.task, ev_task.timings).dump(2) + "\n");
    return 0;
  }

  if (sw->parsed()) {
    EvalSetup s;
    open_eval(sw_backend, sw_retrieval, sw_task, s);
    emit(sw_out, kp::run_sweep(grid, s.inputs(), s.options));
    return 0;
  }

  if (cv->parsed()) {
    EvalSetup s;
    require(!cv_retrieval.datastores.empty(), "coverage needs --datastore");
    open_eval(cv_backend, cv_retrieval, cv_task, s);
    const auto report = kp::run_coverage(s.inputs(), s.options.cfg, cv_task.workers);
    emit(cv_out, report.to_json().dump(2) + "\n");
    return 0;
  }

  if (xv->parsed()) {
    require(!xv_task.empty(), "--task is required");
    require(!xv_vocab.empty(), "--vocab is required");
    const auto spec = kp::load_task(xv_task);
    const auto vocab = kp::Vocab::load(xv_vocab);
    kp::WordVectors vectors;
    kp::SynonymLexicon lexicon;
    if (!xv_vectors.empty()) {
      vectors = kp::WordVectors::load(xv_vectors);
    } else if (spec.word_vectors_path) {
      vectors = kp::WordVectors::load(*spec.word_vectors_path);
    }
    if (!xv_lexicon.empty()) {
      lexicon = kp::SynonymLexicon::load(xv_lexicon);
    } else if (spec.synonym_lexicon_path) {
      lexicon = kp::SynonymLexicon::load(*spec.synonym_lexicon_path);
    }
    emit(xv_out, kp::expand_verbalizers(spec, vocab, vectors, lexicon).dump(2) + "\n");
    return 0;
  }

  if (er->parsed()) {
    require(!er_out.empty(), "--out is required");
    const int sources = !er_contexts.empty() + !er_corpus.empty() + !er_task.task.empty();
    require(sources == 1, "export-records needs exactly one of --contexts, --corpus, --task");
    const auto vocab = open_vocab(er_backend);
    const auto backend = open_backend(er_backend, vocab);

    std::vector<std::vector<kp::TokenId>> contexts;
    std::set<std::vector<kp::TokenId>> seen;
    auto add = [&](std::vector<kp::TokenId> ctx) {
      if (seen.insert(ctx).second) contexts.push_back(std::move(ctx));
    };
    if (!er_contexts.empty()) {
      std::istringstream in(read_text(er_contexts));
      for (std::string line; std::getline(in, line);) add(kp::tokenize(line, vocab));
    } else if (!er_corpus.empty()) {
      for (const auto& p : er_corpus) {
        for (const auto& doc : kp::split_documents(read_text(p), vocab)) {
          for (std::size_t i = 1; i < doc.tokens.size(); ++i) {
            add({doc.tokens.begin(), doc.tokens.begin() + static_cast<std::ptrdiff_t>(i)});
          }
        }
      }
    } else {
      require(!er_task.data.empty(), "--task needs --data");
      require(er_task.shots == 0 || !er_task.train.empty(), "--shots needs --train");
      const auto spec = kp::load_task(er_task.task);
      const auto test = kp::load_dataset(er_task.data, spec);
      std::vector<kp::Instance> train;
      if (!er_task.train.empty()) train = kp::load_dataset(er_task.train, spec);
      if (!spec.domain_string.empty()) add(kp::render_domain_prompt(spec, vocab));
      if (er_task.shots == 0) {
        for (const auto& inst : test) add(kp::render_prompt(spec, inst.text, vocab));
      } else {
        for (const auto seed : er_task.seeds) {
          const auto demos = kp::sample_demos(train, er_task.shots, seed);
          for (const auto& inst : test) add(kp::render_prompt(spec, inst.text, vocab, &demos));
        }
      }
    }
    const auto records = kp::export_records(*backend, contexts);
    kp::write_records(er_out, backend->dim(), backend->vocab_size(), records);
    std::cerr << "wrote " << records.size() << " records to " << er_out << '\n';
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const kp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const kp::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const kp::InvariantError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
}
