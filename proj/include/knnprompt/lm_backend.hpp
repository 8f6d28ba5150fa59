#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "knnprompt/core.hpp"

namespace knnprompt {

// Produces f(c) and P_LM(. | c) for a left context c. Implementations are
// deterministic and safe to query concurrently.
class LmBackend {
 public:
  virtual ~LmBackend() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual Embedding encode(std::span<const TokenId> context) const = 0;
  virtual DenseDist next_dist(std::span<const TokenId> context) const = 0;
};

struct ToyLmConfig {
  std::uint64_t seed = 0;
  std::size_t dim = 16;
  std::size_t window = 8;
  double inv_temperature = 5.0;  // logit scale 1 / tau_lm
};

// Untrained log-bilinear model with seeded embeddings.
//
//   row(t)        splitmix64 seeded with seed ^ (t * 0xD1B54A32D192ED03),
//                 Box-Muller pairs of Gaussians, L2-normalized, stored as f32
//   encode(c)     mean of the rows of the last min(window, |c|) tokens,
//                 L2-normalized; zero vector for an empty context
//   next_dist(c)  softmax(inv_temperature * row(v) . encode(c)); uniform for
//                 an empty context
//
// All accumulation is in f64 and results are rounded to f32 once.
class ToyLbLm final : public LmBackend {
 public:
  ToyLbLm(std::size_t vocab_size, ToyLmConfig config);

  std::size_t dim() const override { return config_.dim; }
  std::size_t vocab_size() const override { return vocab_size_; }
  Embedding encode(std::span<const TokenId> context) const override;
  DenseDist next_dist(std::span<const TokenId> context) const override;

  std::span<const float> row(TokenId id) const;
  const ToyLmConfig& config() const noexcept { return config_; }

 private:
  ToyLmConfig config_;
  std::size_t vocab_size_;
  std::vector<float> table_;  // vocab_size x dim, row-major
};

// One exported (context -> embedding, distribution) pair.
struct LmRecord {
  std::vector<TokenId> context;
  Embedding embedding;
  std::vector<float> probs;

  friend bool operator==(const LmRecord&, const LmRecord&) = default;
};

// Row sums of record-file distributions are checked against this looser
// bound: exporters quantize a large softmax to f32.
inline constexpr double kRecordProbTolerance = 1e-4;

// Record file ("NNPR", version 1), little-endian:
//   magic, u32 version, u32 dim, u32 vocab_size, u64 count, then per record
//   u32 ctx_len, ctx_len x u32 ids, dim x f32 embedding, vocab_size x f32 probs.
void write_records(const std::filesystem::path& path, std::size_t dim, std::size_t vocab_size,
                   std::span<const LmRecord> records);

struct RecordFile {
  std::size_t dim = 0;
  std::size_t vocab_size = 0;
  std::vector<LmRecord> records;
};

RecordFile read_records(const std::filesystem::path& path);

// Runs `backend` on every context and captures the outputs.
std::vector<LmRecord> export_records(const LmBackend& backend,
                                     std::span<const std::vector<TokenId>> contexts);

// Serves exactly the contexts present in a record file, keyed by the full
// token-id sequence.
class RecordLm final : public LmBackend {
 public:
  RecordLm(std::size_t dim, std::size_t vocab_size, std::vector<LmRecord> records);
  static RecordLm load(const std::filesystem::path& path);

  std::size_t dim() const override { return dim_; }
  std::size_t vocab_size() const override { return vocab_size_; }
  Embedding encode(std::span<const TokenId> context) const override;
  DenseDist next_dist(std::span<const TokenId> context) const override;

  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    Embedding embedding;
    DenseDist dist;
  };
  const Entry& lookup(std::span<const TokenId> context) const;

  std::size_t dim_;
  std::size_t vocab_size_;
  std::map<std::vector<TokenId>, Entry> entries_;
};

}  // namespace knnprompt
