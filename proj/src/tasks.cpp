#include "knnprompt/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "knnprompt/errors.hpp"
#include "knnprompt/rng.hpp"

namespace knnprompt {

void TaskSpec::validate() const {
  const auto first = template_text.find(kTextPlaceholder);
  if (first == std::string::npos) throw ConfigError("task '" + name + "': template has no {text} placeholder");
  if (template_text.find(kTextPlaceholder, first + 1) != std::string::npos) {
    throw ConfigError("task '" + name + "': template has more than one {text} placeholder");
  }
  if (labels.empty()) throw ConfigError("task '" + name + "': no labels");
  std::set<std::string> seen;
  for (const auto& l : labels) {
    if (l.empty()) throw ConfigError("task '" + name + "': empty label");
    if (!seen.insert(l).second) throw ConfigError("task '" + name + "': duplicate label '" + l + "'");
  }
  if (verbalizer.size() != labels.size()) {
    throw ConfigError("task '" + name + "': verbalizer must map every label");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (normalize_pieces(verbalizer[i]).empty()) {
      throw ConfigError("task '" + name + "': verbalizer for '" + labels[i] + "' has no tokens");
    }
  }
  if (fuzzy && fuzzy->size() != labels.size()) {
    throw ConfigError("task '" + name + "': fuzzy must list every label");
  }
}

std::size_t TaskSpec::label_index(std::string_view label) const {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw DataError("unknown label '" + std::string(label) + "'");
  return static_cast<std::size_t>(it - labels.begin());
}

std::string TaskSpec::apply_template(std::string_view text) const {
  std::string out = template_text;
  const auto at = out.find(kTextPlaceholder);
  out.replace(at, kTextPlaceholder.size(), text);
  return out;
}

TaskSpec parse_task(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  TaskSpec spec;
  try {
    spec.name = j.at("name").get<std::string>();
    spec.labels = j.at("labels").get<std::vector<std::string>>();
    spec.template_text = j.at("template").get<std::string>();
    spec.domain_string = j.value("domain_string", std::string{});

    const auto& verb = j.at("verbalizer");
    if (!verb.is_object()) throw ConfigError("task: verbalizer must be an object label -> string");
    for (const auto& l : spec.labels) {
      if (!verb.contains(l)) throw ConfigError("task '" + spec.name + "': no verbalizer for label '" + l + "'");
      spec.verbalizer.push_back(verb.at(l).get<std::string>());
    }
    if (verb.size() != spec.labels.size()) {
      throw ConfigError("task '" + spec.name + "': verbalizer has keys that are not labels");
    }

    if (j.contains("fuzzy") && !j.at("fuzzy").is_null()) {
      const auto& fz = j.at("fuzzy");
      if (!fz.is_object()) throw ConfigError("task: fuzzy must be an object label -> [strings]");
      std::vector<std::vector<std::string>> sets;
      for (const auto& l : spec.labels) {
        sets.push_back(fz.contains(l) ? fz.at(l).get<std::vector<std::string>>() : std::vector<std::string>{});
      }
      for (const auto& [key, _] : fz.items()) {
        if (std::find(spec.labels.begin(), spec.labels.end(), key) == spec.labels.end()) {
          throw ConfigError("task '" + spec.name + "': fuzzy key '" + key + "' is not a label");
        }
      }
      spec.fuzzy = std::move(sets);
    }
    auto resolve = [&](const char* key) -> std::optional<std::filesystem::path> {
      if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
      std::filesystem::path p = j.at(key).get<std::string>();
      return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    spec.word_vectors_path = resolve("word_vectors_path");
    spec.synonym_lexicon_path = resolve("synonym_lexicon_path");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

TaskSpec load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open task spec " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_task(j, path.parent_path());
}

nlohmann::ordered_json task_to_json(const TaskSpec& spec) {
  nlohmann::ordered_json j;
  j["name"] = spec.name;
  j["labels"] = spec.labels;
  nlohmann::ordered_json verb = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < spec.labels.size(); ++i) verb[spec.labels[i]] = spec.verbalizer[i];
  j["verbalizer"] = verb;
  j["template"] = spec.template_text;
  j["domain_string"] = spec.domain_string;
  if (spec.fuzzy) {
    nlohmann::ordered_json fz = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < spec.labels.size(); ++i) fz[spec.labels[i]] = (*spec.fuzzy)[i];
    j["fuzzy"] = fz;
  }
  if (spec.word_vectors_path) j["word_vectors_path"] = spec.word_vectors_path->string();
  if (spec.synonym_lexicon_path) j["synonym_lexicon_path"] = spec.synonym_lexicon_path->string();
  return j;
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<Instance> parse_dataset(std::istream& in, const TaskSpec& spec, std::string_view source) {
  std::vector<Instance> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string at = std::string(source) + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(at + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string() || !j.contains("label") ||
        !j["label"].is_string()) {
      throw DataError(at + ": expected an object with string fields 'text' and 'label'");
    }
    const auto label = j["label"].get<std::string>();
    const auto it = std::find(spec.labels.begin(), spec.labels.end(), label);
    if (it == spec.labels.end()) throw DataError(at + ": unknown label '" + label + "'");
    out.push_back(Instance{j["text"].get<std::string>(), static_cast<std::size_t>(it - spec.labels.begin())});
  }
  return out;
}

std::vector<Instance> load_dataset(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_dataset(in, spec, path.string());
}

DemoSet sample_demos(std::span<const Instance> train, std::size_t n, std::uint64_t seed) {
  if (train.size() < n) {
    throw ConfigError("sample_demos: need " + std::to_string(n) + " training instances, have " +
                      std::to_string(train.size()));
  }
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SplitMix64 rng(seed);
  DemoSet demos;
  demos.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.bounded(train.size() - i));
    std::swap(order[i], order[j]);
    demos.instances.push_back(train[order[i]]);
  }
  return demos;
}

std::string render_prompt_text(const TaskSpec& spec, std::string_view text, const DemoSet* demos) {
  std::string out;
  if (demos != nullptr) {
    for (const auto& d : demos->instances) {
      out += spec.apply_template(d.text);
      out += ' ';
      out += spec.verbalizer.at(d.label);
      out += '\n';
    }
  }
  out += spec.apply_template(text);
  return out;
}

std::vector<TokenId> render_prompt(const TaskSpec& spec, std::string_view text, const Vocab& vocab,
                                   const DemoSet* demos) {
  return tokenize(render_prompt_text(spec, text, demos), vocab);
}

std::vector<TokenId> render_domain_prompt(const TaskSpec& spec, const Vocab& vocab) {
  if (spec.domain_string.empty()) throw ConfigError("task '" + spec.name + "': domain_string is empty");
  return tokenize(spec.domain_string, vocab);
}

// ---------------------------------------------------------------------------
// Compilation

bool CompiledTask::single_token() const noexcept {
  return std::all_of(verbalizer_ids.begin(), verbalizer_ids.end(),
                     [](const auto& ids) { return ids.size() == 1; });
}

namespace {

CompiledTask compile_common(TaskSpec spec, const Vocab& vocab) {
  spec.validate();
  CompiledTask task;
  for (std::size_t i = 0; i < spec.labels.size(); ++i) {
    auto ids = tokenize(spec.verbalizer[i], vocab);
    if (std::find(ids.begin(), ids.end(), kUnkId) != ids.end()) {
      throw ConfigError("task '" + spec.name + "': verbalizer '" + spec.verbalizer[i] +
                        "' contains out-of-vocabulary tokens");
    }
    task.singletons.push_back(ids.size() == 1 ? Neighborhood{ids.front()} : Neighborhood{});
    task.verbalizer_ids.push_back(std::move(ids));
  }
  task.spec = std::move(spec);
  return task;
}

}  // namespace

CompiledTask compile_task(TaskSpec spec, const Vocab& vocab) {
  WordVectors vectors;
  SynonymLexicon lexicon;
  if (!spec.fuzzy) {
    if (spec.word_vectors_path) vectors = WordVectors::load(*spec.word_vectors_path);
    if (spec.synonym_lexicon_path) lexicon = SynonymLexicon::load(*spec.synonym_lexicon_path);
  }
  return compile_task(std::move(spec), vocab, vectors, lexicon);
}

CompiledTask compile_task(TaskSpec spec, const Vocab& vocab, const WordVectors& vectors,
                          const SynonymLexicon& lexicon) {
  CompiledTask task = compile_common(std::move(spec), vocab);
  const auto& s = task.spec;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (task.singletons[i].empty()) {
      task.neighborhoods.emplace_back();  // multi-token: no fuzzy scoring
      continue;
    }
    Neighborhood n;
    if (s.fuzzy) {
      n = resolve_words((*s.fuzzy)[i], vocab);
      n.push_back(task.singletons[i].front());
      std::sort(n.begin(), n.end());
      n.erase(std::unique(n.begin(), n.end()), n.end());
    } else {
      n = build_neighborhood(vectors, lexicon, s.verbalizer[i], vocab);
    }
    task.neighborhoods.push_back(std::move(n));
  }
  return task;
}

}  // namespace knnprompt
