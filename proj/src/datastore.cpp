#include "knnprompt/datastore.hpp"

#include <thread>

#include "binary_io.hpp"
#include "knnprompt/errors.hpp"

namespace knnprompt {

namespace {

constexpr std::string_view kDatastoreMagic = "KNND";
constexpr std::uint32_t kDatastoreVersion = 1;
constexpr std::uint32_t kFlagProvenance = 1u << 0;
constexpr std::uint64_t kHeaderBytes = 4 + 4 + 4 + 8 + 4;
constexpr std::uint64_t kProvenanceBytes = 2 + 8;

bool is_blank(std::string_view line) {
  for (char c : line) {
    if (c != ' ' && c != '\t' && c != '\r') return false;
  }
  return true;
}

}  // namespace

Datastore::Datastore(std::size_t dim) : Datastore(dim, {}, {}) {}

Datastore::Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
                     std::optional<std::vector<Provenance>> provenance)
    : dim_(dim), keys_(std::move(keys)), values_(std::move(values)), provenance_(std::move(provenance)) {
  if (dim_ == 0) throw ConfigError("datastore: invalid dimension 0");
  if (keys_.size() != values_.size() * dim_) {
    throw InvariantError("datastore: " + std::to_string(keys_.size()) + " key floats for " +
                         std::to_string(values_.size()) + " values of dim " + std::to_string(dim_));
  }
  if (provenance_ && provenance_->size() != values_.size()) {
    throw InvariantError("datastore: provenance count does not match entry count");
  }
}

void Datastore::validate(std::size_t vocab_size) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i] >= vocab_size) {
      throw DataError("datastore: value " + std::to_string(values_[i]) + " at entry " + std::to_string(i) +
                      " outside vocab of size " + std::to_string(vocab_size));
    }
  }
}

std::vector<Document> split_documents(std::string_view text, const Vocab& vocab) {
  std::vector<Document> docs;
  std::uint64_t offset = 0;
  Document current;
  auto flush = [&] {
    if (!current.tokens.empty()) {
      current.offset = offset;
      offset += current.tokens.size();
      docs.push_back(std::move(current));
    }
    current = Document{};
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    const auto line = text.substr(pos, end - pos);
    if (is_blank(line)) {
      flush();
    } else {
      auto ids = tokenize(line, vocab);
      current.tokens.insert(current.tokens.end(), ids.begin(), ids.end());
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  flush();
  return docs;
}

BuildResult build_datastore(std::span<const Document> documents, const LmBackend& backend,
                            const BuildOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t dim = backend.dim();

  struct Chunk {
    std::vector<float> keys;
    std::vector<TokenId> values;
    std::vector<Provenance> provenance;
  };
  std::vector<Chunk> chunks(documents.size());

  auto build_one = [&](std::size_t d) {
    const auto& doc = documents[d];
    auto& chunk = chunks[d];
    const auto tokens = std::span<const TokenId>(doc.tokens);
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      const Embedding key = backend.encode(tokens.first(i));
      if (key.size() != dim) {
        throw InvariantError("datastore build: backend returned embedding of dim " +
                             std::to_string(key.size()) + ", expected " + std::to_string(dim));
      }
      chunk.keys.insert(chunk.keys.end(), key.begin(), key.end());
      chunk.values.push_back(tokens[i]);
      if (options.provenance) chunk.provenance.push_back({options.corpus_id, doc.offset + i});
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, documents.size()));
  if (workers == 1) {
    for (std::size_t d = 0; d < documents.size(); ++d) build_one(d);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t d = w; d < documents.size(); d += workers) build_one(d);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  BuildReport report;
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<Provenance> provenance;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    report.tokens_ingested += documents[d].tokens.size();
    auto& c = chunks[d];
    keys.insert(keys.end(), c.keys.begin(), c.keys.end());
    values.insert(values.end(), c.values.begin(), c.values.end());
    provenance.insert(provenance.end(), c.provenance.begin(), c.provenance.end());
  }
  report.entries_written = values.size();
  Datastore store(dim, std::move(keys), std::move(values),
                  options.provenance ? std::optional(std::move(provenance)) : std::nullopt);
  store.validate(backend.vocab_size());
  report.elapsed = std::chrono::steady_clock::now() - start;
  return BuildResult{std::move(store), report};
}

void save_datastore(const Datastore& store, const std::filesystem::path& path) {
  detail::BinaryWriter w(path);
  w.magic(kDatastoreMagic);
  w.put<std::uint32_t>(kDatastoreVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.dim()));
  w.put<std::uint64_t>(store.size());
  w.put<std::uint32_t>(store.has_provenance() ? kFlagProvenance : 0u);
  w.put_all<float>(store.keys());
  w.put_all<TokenId>(store.values());
  for (const auto& p : store.provenance()) {
    w.put<std::uint16_t>(p.corpus_id);
    w.put<std::uint64_t>(p.offset);
  }
  w.finish();
}

Datastore load_datastore(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kDatastoreMagic);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kDatastoreVersion) {
    throw FormatError(FormatErrc::kUnsupportedVersion,
                      in.path() + ": unsupported version " + std::to_string(version));
  }
  const auto dim = in.get<std::uint32_t>("dim");
  if (dim == 0) throw FormatError(FormatErrc::kInvalidDimension, in.path() + ": invalid dimension 0");
  const auto count = in.get<std::uint64_t>("count");
  const auto flags = in.get<std::uint32_t>("flags");
  if ((flags & ~kFlagProvenance) != 0) {
    throw FormatError(FormatErrc::kMalformed, in.path() + ": unknown flags " + std::to_string(flags));
  }
  const bool has_prov = (flags & kFlagProvenance) != 0;

  // Guard the multiplication below against absurd headers.
  const std::uint64_t per_entry = 4ull * dim + 4 + (has_prov ? kProvenanceBytes : 0);
  if (count > (in.size() / per_entry) + 1) {
    throw FormatError(FormatErrc::kTruncated,
                      in.path() + ": truncated file: header declares " + std::to_string(count) +
                          " entries, expected " + std::to_string(kHeaderBytes + count * per_entry) +
                          " bytes, got " + std::to_string(in.size()));
  }
  in.require_total(kHeaderBytes + count * per_entry);

  std::vector<float> keys(count * dim);
  in.get_all<float>(keys, "keys");
  std::vector<TokenId> values(count);
  in.get_all<TokenId>(values, "values");
  std::optional<std::vector<Provenance>> provenance;
  if (has_prov) {
    provenance.emplace(count);
    for (auto& p : *provenance) {
      p.corpus_id = in.get<std::uint16_t>("provenance");
      p.offset = in.get<std::uint64_t>("provenance");
    }
  }
  in.expect_end();
  if (!all_finite(keys)) throw FormatError(FormatErrc::kMalformed, in.path() + ": non-finite key");
  return Datastore(dim, std::move(keys), std::move(values), std::move(provenance));
}

Datastore merge_datastores(std::span<const Datastore> stores) {
  if (stores.empty()) throw ConfigError("merge: no datastores given");
  const std::size_t dim = stores.front().dim();
  bool all_prov = true;
  std::size_t total = 0;
  for (const auto& s : stores) {
    if (s.dim() != dim) {
      throw ConfigError("merge: dim mismatch (" + std::to_string(s.dim()) + " vs " + std::to_string(dim) + ")");
    }
    all_prov = all_prov && s.has_provenance();
    total += s.size();
  }
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<Provenance> provenance;
  keys.reserve(total * dim);
  values.reserve(total);
  for (const auto& s : stores) {
    keys.insert(keys.end(), s.keys().begin(), s.keys().end());
    values.insert(values.end(), s.values().begin(), s.values().end());
    if (all_prov) provenance.insert(provenance.end(), s.provenance().begin(), s.provenance().end());
  }
  return Datastore(dim, std::move(keys), std::move(values),
                   all_prov ? std::optional(std::move(provenance)) : std::nullopt);
}

}  // namespace knnprompt
