#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnprompt/core.hpp"
#include "knnprompt/verbalizer.hpp"
#include <json.hpp>

namespace knnprompt {

inline constexpr std::string_view kTextPlaceholder = "{text}";

// A classification task as prompt template + verbalizer + domain string.
// `verbalizer` and `fuzzy` are indexed parallel to `labels`.
struct TaskSpec {
  std::string name;
  std::vector<std::string> labels;
  std::vector<std::string> verbalizer;
  std::string template_text;
  std::string domain_string;
  std::optional<std::vector<std::vector<std::string>>> fuzzy;
  std::optional<std::filesystem::path> word_vectors_path;
  std::optional<std::filesystem::path> synonym_lexicon_path;

  // Throws ConfigError on a missing/duplicated placeholder, empty or duplicate
  // labels, or a label without a verbalizer.
  void validate() const;

  std::size_t label_index(std::string_view label) const;
  std::string apply_template(std::string_view text) const;
};

// Relative resource paths are resolved against `base_dir`.
TaskSpec parse_task(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
TaskSpec load_task(const std::filesystem::path& path);
nlohmann::ordered_json task_to_json(const TaskSpec& spec);

struct Instance {
  std::string text;
  std::size_t label = 0;  // index into TaskSpec::labels

  friend bool operator==(const Instance&, const Instance&) = default;
};

// JSONL with `text` and `label` fields. Blank lines are skipped. Errors carry
// the 1-based line number.
std::vector<Instance> parse_dataset(std::istream& in, const TaskSpec& spec, std::string_view source = "<stream>");
std::vector<Instance> load_dataset(const std::filesystem::path& path, const TaskSpec& spec);

struct DemoSet {
  std::vector<Instance> instances;
  std::uint64_t seed = 0;
};

// n distinct instances drawn uniformly without replacement (seeded
// Fisher-Yates), in sampled order.
DemoSet sample_demos(std::span<const Instance> train, std::size_t n, std::uint64_t seed);

// Each demo as template(demo) + " " + verbalizer(gold) + "\n", then
// template(text).
std::string render_prompt_text(const TaskSpec& spec, std::string_view text, const DemoSet* demos = nullptr);
std::vector<TokenId> render_prompt(const TaskSpec& spec, std::string_view text, const Vocab& vocab,
                                   const DemoSet* demos = nullptr);
std::vector<TokenId> render_domain_prompt(const TaskSpec& spec, const Vocab& vocab);

// Task resolved against a vocab: verbalizer token ids and per-label fuzzy
// neighborhoods. Neighborhoods come from the inline `fuzzy` field if present,
// else from the referenced word vectors / lexicon, else are singletons.
struct CompiledTask {
  TaskSpec spec;
  std::vector<std::vector<TokenId>> verbalizer_ids;
  std::vector<Neighborhood> neighborhoods;
  std::vector<Neighborhood> singletons;  // {V(y)} per label; empty if multi-token

  std::size_t num_labels() const noexcept { return spec.labels.size(); }
  bool single_token() const noexcept;
};

CompiledTask compile_task(TaskSpec spec, const Vocab& vocab);
CompiledTask compile_task(TaskSpec spec, const Vocab& vocab, const WordVectors& vectors,
                          const SynonymLexicon& lexicon);

}  // namespace knnprompt
