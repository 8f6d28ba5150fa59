#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "knnprompt/ann_index.hpp"
#include "knnprompt/core.hpp"
#include "knnprompt/knn_scoring.hpp"
#include "knnprompt/lm_backend.hpp"
#include "knnprompt/tasks.hpp"

namespace knnprompt {

// The eight combinations of {retrieval, fuzzy verbalizer, PMI} on top of the
// base LM.
enum class ScoringMode {
  kLm,
  kLmPmi,
  kKnnLm,
  kLmFuzzy,
  kLmFuzzyPmi,
  kKnnFuzzy,
  kKnnPmi,
  kKnnPrompt,
};

inline constexpr std::array<ScoringMode, 8> kAllModes = {
    ScoringMode::kLm,         ScoringMode::kLmPmi,    ScoringMode::kKnnLm,  ScoringMode::kLmFuzzy,
    ScoringMode::kLmFuzzyPmi, ScoringMode::kKnnFuzzy, ScoringMode::kKnnPmi, ScoringMode::kKnnPrompt,
};

struct ModeFeatures {
  bool retrieval;
  bool fuzzy;
  bool pmi;
};

ModeFeatures features(ScoringMode mode) noexcept;
std::string_view mode_name(ScoringMode mode) noexcept;  // "LM", "KNN_PROMPT", ...
ScoringMode parse_mode(std::string_view name);          // throws ConfigError

// Denominator model for PMI: plain LM, kNN-LM (retrieving for the domain
// prompt too), or a uniform prior.
enum class PmiPrior { kLm, kKnnLm, kUniform };

std::string_view prior_name(PmiPrior prior) noexcept;
PmiPrior parse_prior(std::string_view name);

// Per-label scores in label declaration order.
struct LabelScores {
  std::vector<double> scores;
  bool normalized = false;
  std::size_t skipped_tokens = 0;  // PMI terms dropped for a ~zero domain prior

  // First maximal label; declaration order breaks ties.
  std::size_t argmax() const;
};

// Divides by the total. Throws DataError("degenerate label scores") if it is 0.
LabelScores normalize_scores(LabelScores raw);

inline constexpr double kMinDomainProb = 1e-12;

// use_knn = false: backend.next_dist(context).
// use_knn = true: interpolate(next_dist, knn_distribution(search(encode)), lambda),
// falling back to the LM distribution when retrieval returns nothing.
DenseDist next_token_dist(std::span<const TokenId> context, const LmBackend& backend,
                          const Retriever* retriever, const RetrievalConfig& cfg, bool use_knn);

// score(y) = dist(V(y)) for single-token verbalizers, normalized.
LabelScores score_plain(const DenseDist& dist, std::span<const Neighborhood> verbalizer_tokens);

// Multi-token verbalizers under the pure LM: product of next-token
// conditionals along V(y), normalized.
LabelScores score_chain(const LmBackend& backend, std::span<const TokenId> prompt,
                        std::span<const std::vector<TokenId>> verbalizers);

// score(y) = Σ_{v ∈ N(V(y))} dist(v), normalized. A token shared by two
// labels counts towards both.
LabelScores score_fuzzy(const DenseDist& dist, std::span<const Neighborhood> neighborhoods);

// dist_prompt(v) / dist_domain(v). Throws DataError("zero domain prior") if
// dist_domain(v) <= kMinDomainProb.
double pmi_dc(const DenseDist& dist_prompt, const DenseDist& dist_domain, TokenId token);

// score(y) = Σ_{v ∈ N(V(y))} pmi_dc(v), normalized. Tokens with a ~zero domain
// prior are skipped and counted in skipped_tokens.
LabelScores score_full(const DenseDist& prompt_dist, const DenseDist& domain_dist,
                       std::span<const Neighborhood> neighborhoods);

// Everything a scorer reads. Non-owning; all referents outlive the scorer.
struct ScoringResources {
  const LmBackend* backend = nullptr;
  const Retriever* retriever = nullptr;  // required by retrieval modes
  RetrievalConfig cfg;
  PmiPrior prior = PmiPrior::kKnnLm;
};

// Scores of one prompt under every requested mode, plus kNN coverage.
struct PromptScores {
  std::vector<LabelScores> per_mode;  // parallel to the requested modes
  std::vector<std::size_t> predictions;
  std::optional<bool> bare_covered;   // set when a retriever is present
  std::optional<bool> fuzzy_covered;
};

// Validates resources against the requested modes once, precomputes the
// domain-prompt distributions, then scores prompts. Immutable after
// construction; score() may be called concurrently.
class Scorer {
 public:
  Scorer(const CompiledTask& task, const Vocab& vocab, ScoringResources resources,
         std::span<const ScoringMode> modes);

  PromptScores score(std::span<const TokenId> prompt) const;
  std::span<const ScoringMode> modes() const noexcept { return modes_; }

 private:
  LabelScores score_mode(ScoringMode mode, std::span<const TokenId> prompt, const DenseDist& lm,
                         const DenseDist* knnlm) const;

  const CompiledTask* task_;
  ScoringResources res_;
  std::vector<ScoringMode> modes_;
  bool need_knn_ = false;
  std::optional<DenseDist> domain_lm_;
  std::optional<DenseDist> domain_knnlm_;
  std::optional<DenseDist> uniform_;
};

// Argmax label of `mode` for one instance.
std::size_t predict(const CompiledTask& task, const Instance& instance, ScoringMode mode,
                    const ScoringResources& resources, const Vocab& vocab, const DemoSet* demos = nullptr);

}  // namespace knnprompt
