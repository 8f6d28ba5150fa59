#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnprompt/core.hpp"

namespace knnprompt {

// word -> vector, uniform dimension. Text format: `word v1 ... vd` per line.
class WordVectors {
 public:
  WordVectors() = default;
  explicit WordVectors(std::map<std::string, std::vector<float>> vectors);
  static WordVectors load(const std::filesystem::path& path);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return vectors_.size(); }
  bool empty() const noexcept { return vectors_.empty(); }
  const std::vector<float>* find(std::string_view word) const;
  const std::map<std::string, std::vector<float>>& entries() const noexcept { return vectors_; }

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<float>> vectors_;
};

// Directed synonym relation. TSV: `word<TAB>synonym` per line.
class SynonymLexicon {
 public:
  SynonymLexicon() = default;
  static SynonymLexicon load(const std::filesystem::path& path);

  void add(const std::string& word, const std::string& synonym);
  const std::set<std::string>* find(std::string_view word) const;
  std::size_t size() const noexcept { return synonyms_.size(); }

 private:
  std::map<std::string, std::set<std::string>> synonyms_;
};

// The k words (query excluded) with the highest cosine similarity to `word`,
// ties broken by lexicographic order. Throws DataError("no vector for word").
std::vector<std::string> top_k_similar(const WordVectors& vectors, std::string_view word,
                                       std::size_t k = 5);

// Sorted, duplicate-free token ids.
using Neighborhood = std::vector<TokenId>;

inline constexpr std::size_t kFuzzyTopK = 5;

// N(v) = {v} ∪ top-5 cosine neighbors ∪ synonyms, restricted to expansions
// that normalize to exactly one in-vocabulary token.
Neighborhood build_neighborhood(const WordVectors& vectors, const SynonymLexicon& lexicon,
                                std::string_view verbalizer_token, const Vocab& vocab);

// Token ids of the given words that normalize to a single in-vocab token.
Neighborhood resolve_words(std::span<const std::string> words, const Vocab& vocab);

// True iff some label set intersects the support of p_knn. Pass singleton
// sets for bare-verbalizer coverage.
bool coverage(const SparseDist& p_knn, std::span<const Neighborhood> label_sets);

}  // namespace knnprompt
