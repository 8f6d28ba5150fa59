#include "knnprompt/lm_backend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "binary_io.hpp"
#include "knnprompt/errors.hpp"
#include "knnprompt/rng.hpp"

namespace knnprompt {

namespace {

constexpr std::string_view kRecordMagic = "NNPR";
constexpr std::uint32_t kRecordVersion = 1;
constexpr std::uint64_t kRowSeedMultiplier = 0xD1B54A32D192ED03ULL;

void check_ids(std::span<const TokenId> context, std::size_t vocab_size) {
  for (TokenId t : context) {
    if (t >= vocab_size) {
      throw InvariantError("token id " + std::to_string(t) + " out of range for vocab of size " +
                           std::to_string(vocab_size));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ToyLbLm

ToyLbLm::ToyLbLm(std::size_t vocab_size, ToyLmConfig config)
    : config_(config), vocab_size_(vocab_size) {
  if (vocab_size_ == 0) throw ConfigError("toy LM: empty vocab");
  if (config_.dim == 0) throw ConfigError("toy LM: dim must be positive");
  if (config_.window == 0) throw ConfigError("toy LM: window must be positive");
  if (!(config_.inv_temperature > 0.0) || !std::isfinite(config_.inv_temperature)) {
    throw ConfigError("toy LM: logit scale must be positive");
  }

  const std::size_t dim = config_.dim;
  table_.resize(vocab_size_ * dim);
  std::vector<double> row(dim + 1);
  for (std::size_t t = 0; t < vocab_size_; ++t) {
    SplitMix64 rng(config_.seed ^ (static_cast<std::uint64_t>(t) * kRowSeedMultiplier));
    for (std::size_t j = 0; j < dim; j += 2) {
      const double u1 = rng.next_unit();
      const double u2 = rng.next_unit();
      const double r = std::sqrt(-2.0 * std::log(u1));
      row[j] = r * std::cos(2.0 * std::numbers::pi * u2);
      row[j + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) {
      table_[t * dim + j] = static_cast<float>(row[j] / norm);
    }
  }
}

std::span<const float> ToyLbLm::row(TokenId id) const {
  check_ids(std::span(&id, 1), vocab_size_);
  return std::span<const float>(table_).subspan(std::size_t{id} * config_.dim, config_.dim);
}

Embedding ToyLbLm::encode(std::span<const TokenId> context) const {
  check_ids(context, vocab_size_);
  const std::size_t dim = config_.dim;
  Embedding out(dim, 0.0f);
  if (context.empty()) return out;

  const std::size_t n = std::min(config_.window, context.size());
  const auto window = context.last(n);
  std::vector<double> mean(dim, 0.0);
  for (TokenId t : window) {
    const float* r = table_.data() + std::size_t{t} * dim;
    for (std::size_t j = 0; j < dim; ++j) mean[j] += r[j];
  }
  double norm = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    mean[j] /= static_cast<double>(n);
    norm += mean[j] * mean[j];
  }
  norm = std::sqrt(norm);
  // Antipodal rows can cancel exactly; fall back to the zero embedding.
  if (norm == 0.0) return out;
  for (std::size_t j = 0; j < dim; ++j) out[j] = static_cast<float>(mean[j] / norm);
  return out;
}

DenseDist ToyLbLm::next_dist(std::span<const TokenId> context) const {
  if (context.empty()) return DenseDist::uniform(vocab_size_);
  const Embedding h = encode(context);
  const std::size_t dim = config_.dim;

  std::vector<double> logits(vocab_size_);
  double max_logit = -INFINITY;
  for (std::size_t v = 0; v < vocab_size_; ++v) {
    const float* r = table_.data() + v * dim;
    double dot = 0.0;
    for (std::size_t j = 0; j < dim; ++j) dot += static_cast<double>(r[j]) * h[j];
    logits[v] = dot * config_.inv_temperature;
    max_logit = std::max(max_logit, logits[v]);
  }
  double total = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - max_logit);
    total += l;
  }
  std::vector<float> probs(vocab_size_);
  for (std::size_t v = 0; v < vocab_size_; ++v) probs[v] = static_cast<float>(logits[v] / total);
  return DenseDist(std::move(probs));
}

// ---------------------------------------------------------------------------
// Record files

void write_records(const std::filesystem::path& path, std::size_t dim, std::size_t vocab_size,
                   std::span<const LmRecord> records) {
  if (dim == 0) throw ConfigError("record file: invalid dimension 0");
  for (const auto& r : records) {
    if (r.embedding.size() != dim) throw ConfigError("record file: dim mismatch across records");
    if (r.probs.size() != vocab_size) throw ConfigError("record file: vocab size mismatch across records");
  }
  detail::BinaryWriter w(path);
  w.magic(kRecordMagic);
  w.put<std::uint32_t>(kRecordVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(vocab_size));
  w.put<std::uint64_t>(records.size());
  for (const auto& r : records) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.context.size()));
    w.put_all<TokenId>(r.context);
    w.put_all<float>(r.embedding);
    w.put_all<float>(r.probs);
  }
  w.finish();
}

RecordFile read_records(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kRecordMagic);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kRecordVersion) {
    throw FormatError(FormatErrc::kUnsupportedVersion,
                      in.path() + ": unsupported version " + std::to_string(version));
  }
  RecordFile file;
  file.dim = in.get<std::uint32_t>("dim");
  file.vocab_size = in.get<std::uint32_t>("vocab_size");
  if (file.dim == 0) throw FormatError(FormatErrc::kInvalidDimension, in.path() + ": invalid dimension 0");
  if (file.vocab_size == 0) throw FormatError(FormatErrc::kMalformed, in.path() + ": vocab_size 0");
  const auto count = in.get<std::uint64_t>("count");

  // Every record carries at least its length prefix and two payload rows.
  const std::uint64_t min_record = 4 + 4 * (file.dim + file.vocab_size);
  if (count > in.remaining() / min_record) {
    throw FormatError(FormatErrc::kTruncated,
                      in.path() + ": truncated file: header declares " + std::to_string(count) +
                          " records, expected at least " +
                          std::to_string(in.offset() + count * min_record) + " bytes, got " +
                          std::to_string(in.size()));
  }
  file.records.resize(count);
  for (auto& r : file.records) {
    const std::size_t at = in.offset();
    const auto len = in.get<std::uint32_t>("ctx_len");
    if (len > in.remaining() / 4) {
      throw FormatError(FormatErrc::kTruncated, in.path() + ": truncated context at offset " +
                                                    std::to_string(at));
    }
    r.context.resize(len);
    in.get_all<TokenId>(r.context, "context ids");
    r.embedding.resize(file.dim);
    in.get_all<float>(r.embedding, "embedding");
    r.probs.resize(file.vocab_size);
    in.get_all<float>(r.probs, "probabilities");
    for (TokenId t : r.context) {
      if (t >= file.vocab_size) {
        throw FormatError(FormatErrc::kMalformed, in.path() + ": token id " + std::to_string(t) +
                                                      " out of range in record at offset " +
                                                      std::to_string(at));
      }
    }
    if (!all_finite(r.embedding)) {
      throw FormatError(FormatErrc::kMalformed,
                        in.path() + ": non-finite embedding in record at offset " + std::to_string(at));
    }
  }
  in.expect_end();
  return file;
}

std::vector<LmRecord> export_records(const LmBackend& backend,
                                     std::span<const std::vector<TokenId>> contexts) {
  std::vector<LmRecord> out;
  out.reserve(contexts.size());
  for (const auto& ctx : contexts) {
    const auto dist = backend.next_dist(ctx);
    out.push_back(LmRecord{ctx, backend.encode(ctx),
                           std::vector<float>(dist.probs().begin(), dist.probs().end())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// RecordLm

RecordLm::RecordLm(std::size_t dim, std::size_t vocab_size, std::vector<LmRecord> records)
    : dim_(dim), vocab_size_(vocab_size) {
  if (dim_ == 0) throw ConfigError("record LM: invalid dimension 0");
  for (auto& r : records) {
    if (r.embedding.size() != dim_) throw DataError("record LM: dim mismatch across records");
    if (r.probs.size() != vocab_size_) throw DataError("record LM: vocab size mismatch across records");
    check_ids(r.context, vocab_size_);
    DenseDist dist;
    try {
      dist = DenseDist(std::move(r.probs), kRecordProbTolerance);
    } catch (const InvariantError& e) {
      throw DataError(std::string("record LM: ") + e.what());
    }
    auto [it, inserted] =
        entries_.emplace(std::move(r.context), Entry{std::move(r.embedding), std::move(dist)});
    if (!inserted) throw DataError("record LM: duplicate context");
  }
}

RecordLm RecordLm::load(const std::filesystem::path& path) {
  auto file = read_records(path);
  try {
    return RecordLm(file.dim, file.vocab_size, std::move(file.records));
  } catch (const DataError& e) {
    throw FormatError(FormatErrc::kMalformed, path.string() + ": " + e.what());
  }
}

const RecordLm::Entry& RecordLm::lookup(std::span<const TokenId> context) const {
  auto it = entries_.find(std::vector<TokenId>(context.begin(), context.end()));
  if (it == entries_.end()) throw DataError("context not in record file");
  return it->second;
}

Embedding RecordLm::encode(std::span<const TokenId> context) const {
  return lookup(context).embedding;
}

DenseDist RecordLm::next_dist(std::span<const TokenId> context) const {
  return lookup(context).dist;
}

}  // namespace knnprompt
