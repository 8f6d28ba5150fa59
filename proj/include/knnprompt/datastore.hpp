#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "knnprompt/core.hpp"
#include "knnprompt/lm_backend.hpp"

namespace knnprompt {

// Where a stored value token came from: corpus index and token offset in it.
struct Provenance {
  std::uint16_t corpus_id = 0;
  std::uint64_t offset = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

// Key-value pairs (f(c_i), w_i). Keys are a row-major count x dim f32 matrix.
class Datastore {
 public:
  explicit Datastore(std::size_t dim);
  Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
            std::optional<std::vector<Provenance>> provenance = std::nullopt);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<const float> key(std::size_t i) const {
    return std::span<const float>(keys_).subspan(i * dim_, dim_);
  }
  TokenId value(std::size_t i) const { return values_[i]; }
  std::span<const float> keys() const noexcept { return keys_; }
  std::span<const TokenId> values() const noexcept { return values_; }

  bool has_provenance() const noexcept { return provenance_.has_value(); }
  std::span<const Provenance> provenance() const noexcept {
    return provenance_ ? std::span<const Provenance>(*provenance_) : std::span<const Provenance>{};
  }

  // Throws DataError if any value is outside [0, vocab_size).
  void validate(std::size_t vocab_size) const;

  friend bool operator==(const Datastore&, const Datastore&) = default;

 private:
  std::size_t dim_;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
  std::optional<std::vector<Provenance>> provenance_;
};

// A tokenized document; `offset` is the corpus token offset of its first token.
struct Document {
  std::vector<TokenId> tokens;
  std::uint64_t offset = 0;
};

// Blank lines separate documents.
std::vector<Document> split_documents(std::string_view text, const Vocab& vocab);

struct BuildOptions {
  bool provenance = false;
  std::uint16_t corpus_id = 0;
  std::size_t workers = 1;
};

struct BuildReport {
  std::uint64_t tokens_ingested = 0;
  std::uint64_t entries_written = 0;
  std::chrono::duration<double> elapsed{};
};

struct BuildResult {
  Datastore store;
  BuildReport report;
};

// One entry (encode(doc[0..i)), doc[i]) per position i >= 1 of each document,
// in document order. Output is independent of `workers`.
BuildResult build_datastore(std::span<const Document> documents, const LmBackend& backend,
                            const BuildOptions& options = {});

// "KNND" version 1, little-endian: magic, u32 version, u32 dim, u64 count,
// u32 flags (bit 0: provenance), count x dim f32 keys, count x u32 values,
// optional count x (u16 corpus id, u64 offset).
void save_datastore(const Datastore& store, const std::filesystem::path& path);
Datastore load_datastore(const std::filesystem::path& path);

// Concatenation in the given order. Provenance survives only if every input
// carries it.
Datastore merge_datastores(std::span<const Datastore> stores);

}  // namespace knnprompt
