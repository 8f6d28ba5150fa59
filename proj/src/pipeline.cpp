#include "knnprompt/pipeline.hpp"

#include <algorithm>

#include "knnprompt/errors.hpp"

namespace knnprompt {

ModeFeatures features(ScoringMode mode) noexcept {
  switch (mode) {
    case ScoringMode::kLm: return {false, false, false};
    case ScoringMode::kLmPmi: return {false, false, true};
    case ScoringMode::kKnnLm: return {true, false, false};
    case ScoringMode::kLmFuzzy: return {false, true, false};
    case ScoringMode::kLmFuzzyPmi: return {false, true, true};
    case ScoringMode::kKnnFuzzy: return {true, true, false};
    case ScoringMode::kKnnPmi: return {true, false, true};
    case ScoringMode::kKnnPrompt: return {true, true, true};
  }
  return {false, false, false};
}

std::string_view mode_name(ScoringMode mode) noexcept {
  switch (mode) {
    case ScoringMode::kLm: return "LM";
    case ScoringMode::kLmPmi: return "LM_PMI";
    case ScoringMode::kKnnLm: return "KNN_LM";
    case ScoringMode::kLmFuzzy: return "LM_FUZZY";
    case ScoringMode::kLmFuzzyPmi: return "LM_FUZZY_PMI";
    case ScoringMode::kKnnFuzzy: return "KNN_FUZZY";
    case ScoringMode::kKnnPmi: return "KNN_PMI";
    case ScoringMode::kKnnPrompt: return "KNN_PROMPT";
  }
  return "?";
}

ScoringMode parse_mode(std::string_view name) {
  for (auto m : kAllModes) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown scoring mode '" + std::string(name) + "'");
}

std::string_view prior_name(PmiPrior prior) noexcept {
  switch (prior) {
    case PmiPrior::kLm: return "lm";
    case PmiPrior::kKnnLm: return "knnlm";
    case PmiPrior::kUniform: return "uniform";
  }
  return "?";
}

PmiPrior parse_prior(std::string_view name) {
  for (auto p : {PmiPrior::kLm, PmiPrior::kKnnLm, PmiPrior::kUniform}) {
    if (prior_name(p) == name) return p;
  }
  throw ConfigError("unknown PMI prior '" + std::string(name) + "' (expected lm, knnlm or uniform)");
}

std::size_t LabelScores::argmax() const {
  if (scores.empty()) throw InvariantError("argmax of empty label scores");
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

LabelScores normalize_scores(LabelScores raw) {
  double total = 0.0;
  for (double s : raw.scores) total += s;
  if (!(total > 0.0)) throw DataError("degenerate label scores");
  for (double& s : raw.scores) s /= total;
  raw.normalized = true;
  return raw;
}

DenseDist next_token_dist(std::span<const TokenId> context, const LmBackend& backend,
                          const Retriever* retriever, const RetrievalConfig& cfg, bool use_knn) {
  DenseDist lm = backend.next_dist(context);
  if (!use_knn) return lm;
  if (retriever == nullptr) throw ConfigError("kNN distribution requested without a datastore");
  const auto neighbors = retriever->search(backend.encode(context), cfg.k);
  return interpolate(lm, knn_distribution(neighbors, cfg.temperature), cfg.lambda);
}

LabelScores score_plain(const DenseDist& dist, std::span<const Neighborhood> verbalizer_tokens) {
  LabelScores raw;
  for (const auto& v : verbalizer_tokens) {
    if (v.size() != 1) throw ConfigError("score_plain: verbalizers must be single tokens");
    raw.scores.push_back(dist[v.front()]);
  }
  return normalize_scores(std::move(raw));
}

LabelScores score_chain(const LmBackend& backend, std::span<const TokenId> prompt,
                        std::span<const std::vector<TokenId>> verbalizers) {
  LabelScores raw;
  std::vector<TokenId> context;
  for (const auto& seq : verbalizers) {
    if (seq.empty()) throw ConfigError("score_chain: empty verbalizer");
    context.assign(prompt.begin(), prompt.end());
    double p = 1.0;
    for (TokenId t : seq) {
      p *= backend.next_dist(context)[t];
      context.push_back(t);
    }
    raw.scores.push_back(p);
  }
  return normalize_scores(std::move(raw));
}

LabelScores score_fuzzy(const DenseDist& dist, std::span<const Neighborhood> neighborhoods) {
  LabelScores raw;
  for (const auto& n : neighborhoods) {
    if (n.empty()) throw ConfigError("score_fuzzy: empty neighborhood");
    double s = 0.0;
    for (TokenId t : n) s += dist[t];
    raw.scores.push_back(s);
  }
  return normalize_scores(std::move(raw));
}

double pmi_dc(const DenseDist& dist_prompt, const DenseDist& dist_domain, TokenId token) {
  const double denom = dist_domain[token];
  if (denom <= kMinDomainProb) throw DataError("zero domain prior");
  return static_cast<double>(dist_prompt[token]) / denom;
}

LabelScores score_full(const DenseDist& prompt_dist, const DenseDist& domain_dist,
                       std::span<const Neighborhood> neighborhoods) {
  LabelScores raw;
  std::size_t used = 0;
  for (const auto& n : neighborhoods) {
    if (n.empty()) throw ConfigError("score_full: empty neighborhood");
    double s = 0.0;
    for (TokenId t : n) {
      if (domain_dist[t] <= kMinDomainProb) {
        ++raw.skipped_tokens;
        continue;
      }
      s += pmi_dc(prompt_dist, domain_dist, t);
      ++used;
    }
    raw.scores.push_back(s);
  }
  if (used == 0) throw DataError("degenerate label scores: every PMI term has a zero domain prior");
  return normalize_scores(std::move(raw));
}

// ---------------------------------------------------------------------------
// Scorer

Scorer::Scorer(const CompiledTask& task, const Vocab& vocab, ScoringResources resources,
               std::span<const ScoringMode> modes)
    : task_(&task), res_(resources), modes_(modes.begin(), modes.end()) {
  if (res_.backend == nullptr) throw ConfigError("scorer: no LM backend");
  res_.cfg.validate();
  if (modes_.empty()) throw ConfigError("scorer: no scoring modes requested");
  if (vocab.size() != res_.backend->vocab_size()) {
    throw ConfigError("scorer: vocab has " + std::to_string(vocab.size()) + " tokens but the LM has " +
                      std::to_string(res_.backend->vocab_size()));
  }
  if (res_.retriever != nullptr && res_.retriever->store().dim() != res_.backend->dim()) {
    throw ConfigError("scorer: datastore dim " + std::to_string(res_.retriever->store().dim()) +
                      " does not match LM dim " + std::to_string(res_.backend->dim()));
  }

  bool need_domain_lm = false;
  bool need_domain_knnlm = false;
  for (auto m : modes_) {
    const auto f = features(m);
    if (m != ScoringMode::kLm && !task.single_token()) {
      throw ConfigError("mode " + std::string(mode_name(m)) + " requires single-token verbalizers");
    }
    if (f.retrieval && res_.retriever == nullptr) {
      throw ConfigError("mode " + std::string(mode_name(m)) + " requires a datastore");
    }
    need_knn_ = need_knn_ || f.retrieval;
    if (f.pmi) {
      if (task.spec.domain_string.empty()) {
        throw ConfigError("mode " + std::string(mode_name(m)) + " requires a non-empty domain_string");
      }
      if (res_.prior == PmiPrior::kUniform) continue;
      if (f.retrieval && res_.prior == PmiPrior::kKnnLm) {
        need_domain_knnlm = true;
      } else {
        need_domain_lm = true;
      }
    }
  }

  if (need_domain_lm || need_domain_knnlm) {
    const auto domain = render_domain_prompt(task.spec, vocab);
    if (need_domain_lm) domain_lm_ = next_token_dist(domain, *res_.backend, nullptr, res_.cfg, false);
    if (need_domain_knnlm) domain_knnlm_ = next_token_dist(domain, *res_.backend, res_.retriever, res_.cfg, true);
  }
  uniform_ = DenseDist::uniform(res_.backend->vocab_size());
}

LabelScores Scorer::score_mode(ScoringMode mode, std::span<const TokenId> prompt, const DenseDist& lm,
                               const DenseDist* knnlm) const {
  const auto f = features(mode);
  if (mode == ScoringMode::kLm && !task_->single_token()) {
    return score_chain(*res_.backend, prompt, task_->verbalizer_ids);
  }
  const DenseDist& dist = f.retrieval ? *knnlm : lm;
  const std::span<const Neighborhood> sets = f.fuzzy ? task_->neighborhoods : task_->singletons;
  if (!f.pmi) return f.fuzzy ? score_fuzzy(dist, sets) : score_plain(dist, sets);

  const DenseDist* domain = &*uniform_;
  if (res_.prior == PmiPrior::kLm || (res_.prior == PmiPrior::kKnnLm && !f.retrieval)) {
    domain = &*domain_lm_;
  } else if (res_.prior == PmiPrior::kKnnLm) {
    domain = &*domain_knnlm_;
  }
  return score_full(dist, *domain, sets);
}

PromptScores Scorer::score(std::span<const TokenId> prompt) const {
  PromptScores out;
  const DenseDist lm = res_.backend->next_dist(prompt);
  std::optional<DenseDist> knnlm;
  if (res_.retriever != nullptr) {
    const auto neighbors = res_.retriever->search(res_.backend->encode(prompt), res_.cfg.k);
    const SparseDist p_knn = knn_distribution(neighbors, res_.cfg.temperature);
    out.bare_covered = coverage(p_knn, task_->singletons);
    out.fuzzy_covered = coverage(p_knn, task_->neighborhoods);
    knnlm = interpolate(lm, p_knn, res_.cfg.lambda);
  }
  for (auto m : modes_) {
    out.per_mode.push_back(score_mode(m, prompt, lm, knnlm ? &*knnlm : nullptr));
    out.predictions.push_back(out.per_mode.back().argmax());
  }
  return out;
}

std::size_t predict(const CompiledTask& task, const Instance& instance, ScoringMode mode,
                    const ScoringResources& resources, const Vocab& vocab, const DemoSet* demos) {
  const Scorer scorer(task, vocab, resources, std::span(&mode, 1));
  const auto prompt = render_prompt(task.spec, instance.text, vocab, demos);
  return scorer.score(prompt).predictions.front();
}

}  // namespace knnprompt
