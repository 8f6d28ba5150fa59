#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace knnprompt {

using TokenId = std::uint32_t;

inline constexpr TokenId kUnkId = 0;
inline constexpr std::string_view kUnkToken = "<unk>";

// Absolute tolerance for every "sums to one" check.
inline constexpr double kProbTolerance = 1e-6;

// Context embedding f(c). Components are finite.
using Embedding = std::vector<float>;

bool all_finite(std::span<const float> values) noexcept;

// Token strings in id order. Id 0 is always <unk>.
class Vocab {
 public:
  Vocab();
  // tokens[0] must be "<unk>"; the rest must be unique and non-empty.
  explicit Vocab(std::vector<std::string> tokens);

  // One token per line, line number = id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;
  std::span<const std::string> tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Lowercases, splits on Unicode whitespace, strips leading and trailing
// non-alphanumeric characters from each piece and drops pieces left empty.
std::vector<std::string> normalize_pieces(std::string_view text);

// normalize_pieces mapped through the vocab; unknown pieces become kUnkId.
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);

// Streaming frequency count; feeding the corpus in any chunking that respects
// whitespace boundaries gives the same vocab.
class VocabBuilder {
 public:
  void add_text(std::string_view text);
  std::size_t distinct() const noexcept { return counts_.size(); }
  // <unk> plus the (max_size - 1) most frequent pieces, ties broken by
  // lexicographic order.
  Vocab finish(std::size_t max_size) const;

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
};

Vocab build_vocab(std::span<const std::string> corpus, std::size_t max_size);

// P(v | c) over the whole vocabulary, stored as f32.
class DenseDist {
 public:
  DenseDist() = default;
  // Throws InvariantError unless probabilities are finite, non-negative and
  // sum to one within `tolerance`.
  explicit DenseDist(std::vector<float> probs, double tolerance = kProbTolerance);

  static DenseDist uniform(std::size_t size);
  // Skips validation. For values that are normalized by construction.
  static DenseDist adopt(std::vector<float> probs);

  std::size_t size() const noexcept { return probs_.size(); }
  float operator[](TokenId id) const { return probs_.at(id); }
  std::span<const float> probs() const noexcept { return probs_; }
  double sum() const noexcept;

  friend bool operator==(const DenseDist&, const DenseDist&) = default;

 private:
  std::vector<float> probs_;
};

// Distribution with explicit support, sorted by token id. Empty means "no
// mass", which is only meaningful before interpolation.
class SparseDist {
 public:
  using Entry = std::pair<TokenId, float>;

  SparseDist() = default;
  // Entries must have unique ids and positive probabilities summing to one.
  explicit SparseDist(std::vector<Entry> entries, double tolerance = kProbTolerance);

  bool empty() const noexcept { return entries_.empty(); }
  std::size_t size() const noexcept { return entries_.size(); }
  float prob(TokenId id) const noexcept;
  bool contains(TokenId id) const noexcept { return prob(id) > 0.0f; }
  std::span<const Entry> entries() const noexcept { return entries_; }
  double sum() const noexcept;

  friend bool operator==(const SparseDist&, const SparseDist&) = default;

 private:
  std::vector<Entry> entries_;
};

// weight / total. Throws DataError("degenerate distribution") when every
// weight is zero. Zero-weight ids are not part of the sparse support.
SparseDist normalize(std::span<const std::pair<TokenId, double>> weights);
DenseDist normalize(std::span<const double> weights);

}  // namespace knnprompt
