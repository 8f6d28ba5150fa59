#include "knnprompt/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "knnprompt/errors.hpp"

namespace knnprompt {

bool all_finite(std::span<const float> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() : Vocab(std::vector<std::string>{std::string(kUnkToken)}) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty() || tokens_.front() != kUnkToken) {
    throw ConfigError("vocab: id 0 must be " + std::string(kUnkToken));
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw ConfigError("vocab: empty token at id " + std::to_string(i));
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ConfigError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError(FormatErrc::kIo, "cannot open vocab file " + path.string());
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  // A trailing newline does not introduce an empty token.
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  if (tokens.empty() || tokens.front() != kUnkToken) {
    throw FormatError(FormatErrc::kMalformed,
                      path.string() + ": line 0 must be " + std::string(kUnkToken));
  }
  try {
    return Vocab(std::move(tokens));
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrc::kMalformed, path.string() + ": " + e.what());
  }
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(FormatErrc::kIo, "cannot write vocab file " + path.string());
  }
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) {
    throw FormatError(FormatErrc::kIo, "write failed: " + path.string());
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw InvariantError("token id " + std::to_string(id) + " out of range for vocab of size " +
                         std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id_or_unk(std::string_view token) const {
  return find(token).value_or(kUnkId);
}

// ---------------------------------------------------------------------------
// Tokenization

namespace {

// Decodes one UTF-8 code point starting at text[pos]; advances pos. Invalid
// sequences decode as the single offending byte.
char32_t decode_utf8(std::string_view text, std::size_t& pos) {
  const auto b0 = static_cast<unsigned char>(text[pos]);
  std::size_t len = 1;
  char32_t cp = b0;
  if (b0 >= 0xF0 && b0 < 0xF8) {
    len = 4;
    cp = b0 & 0x07;
  } else if (b0 >= 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  }
  if (len == 1 || pos + len > text.size()) {
    ++pos;
    return b0;
  }
  for (std::size_t i = 1; i < len; ++i) {
    const auto b = static_cast<unsigned char>(text[pos + i]);
    if ((b & 0xC0) != 0x80) {
      ++pos;
      return b0;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  pos += len;
  return cp;
}

bool is_unicode_space(char32_t c) {
  switch (c) {
    case U' ': case U'\t': case U'\n': case U'\v': case U'\f': case U'\r':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

// ASCII letters and digits count, as does any non-ASCII code point outside
// the common punctuation blocks.
bool is_alnum(char32_t c) {
  if (c < 0x80) {
    return (c >= U'0' && c <= U'9') || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z');
  }
  if (c >= 0x80 && c <= 0xBF) return false;      // Latin-1 punctuation and symbols
  if (c == 0xD7 || c == 0xF7) return false;      // multiplication, division signs
  if (c >= 0x2010 && c <= 0x205E) return false;  // general punctuation
  if (c >= 0x3000 && c <= 0x303F) return false;  // CJK punctuation
  return true;
}

struct Piece {
  std::size_t begin;
  std::size_t end;
};

template <typename Fn>
void for_each_piece(std::string_view text, Fn&& fn) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    // Skip whitespace.
    std::size_t start = pos;
    char32_t c = decode_utf8(text, pos);
    if (is_unicode_space(c)) continue;
    // Collect code point boundaries of the piece; strip non-alnum at the ends.
    std::size_t first_alnum = std::string_view::npos;
    std::size_t last_alnum_end = 0;
    std::size_t cp_begin = start;
    for (;;) {
      if (is_alnum(c)) {
        if (first_alnum == std::string_view::npos) first_alnum = cp_begin;
        last_alnum_end = pos;
      }
      if (pos >= text.size()) break;
      cp_begin = pos;
      std::size_t next = pos;
      char32_t nc = decode_utf8(text, next);
      if (is_unicode_space(nc)) break;
      c = nc;
      pos = next;
    }
    if (first_alnum != std::string_view::npos) fn(Piece{first_alnum, last_alnum_end});
  }
}

std::string lowercase_ascii(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) {
    if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
  }
  return out;
}

}  // namespace

std::vector<std::string> normalize_pieces(std::string_view text) {
  std::vector<std::string> out;
  for_each_piece(text, [&](Piece p) {
    out.push_back(lowercase_ascii(text.substr(p.begin, p.end - p.begin)));
  });
  return out;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> out;
  for_each_piece(text, [&](Piece p) {
    out.push_back(vocab.id_or_unk(lowercase_ascii(text.substr(p.begin, p.end - p.begin))));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Vocab construction

void VocabBuilder::add_text(std::string_view text) {
  for (auto& piece : normalize_pieces(text)) ++counts_[std::move(piece)];
}

Vocab VocabBuilder::finish(std::size_t max_size) const {
  if (max_size < 1) throw ConfigError("build_vocab: max_size must be >= 1");
  std::vector<std::pair<std::string, std::uint64_t>> ranked;
  ranked.reserve(counts_.size());
  for (const auto& [tok, n] : counts_) {
    if (tok != kUnkToken) ranked.emplace_back(tok, n);
  }
  const std::size_t keep = std::min(ranked.size(), max_size - 1);
  auto by_rank = [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep),
                    ranked.end(), by_rank);
  std::vector<std::string> tokens;
  tokens.reserve(keep + 1);
  tokens.emplace_back(kUnkToken);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocab(std::move(tokens));
}

Vocab build_vocab(std::span<const std::string> corpus, std::size_t max_size) {
  VocabBuilder builder;
  for (const auto& chunk : corpus) builder.add_text(chunk);
  return builder.finish(max_size);
}

// ---------------------------------------------------------------------------
// Distributions

namespace {

double sum_f64(std::span<const float> values) {
  double s = 0.0;
  for (float v : values) s += v;
  return s;
}

}  // namespace

DenseDist::DenseDist(std::vector<float> probs, double tolerance) : probs_(std::move(probs)) {
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!std::isfinite(probs_[i]) || probs_[i] < 0.0f) {
      throw InvariantError("dense distribution: invalid probability at id " + std::to_string(i));
    }
  }
  const double s = sum();
  if (std::abs(s - 1.0) > tolerance) {
    throw InvariantError("dense distribution sums to " + std::to_string(s));
  }
}

DenseDist DenseDist::uniform(std::size_t size) {
  if (size == 0) throw InvariantError("uniform distribution over empty vocab");
  return adopt(std::vector<float>(size, static_cast<float>(1.0 / static_cast<double>(size))));
}

DenseDist DenseDist::adopt(std::vector<float> probs) {
  DenseDist d;
  d.probs_ = std::move(probs);
  return d;
}

double DenseDist::sum() const noexcept { return sum_f64(probs_); }

SparseDist::SparseDist(std::vector<Entry> entries, double tolerance)
    : entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const float p = entries_[i].second;
    if (!std::isfinite(p) || p <= 0.0f) {
      throw InvariantError("sparse distribution: non-positive probability for id " +
                           std::to_string(entries_[i].first));
    }
    if (i > 0 && entries_[i - 1].first == entries_[i].first) {
      throw InvariantError("sparse distribution: duplicate id " +
                           std::to_string(entries_[i].first));
    }
  }
  if (!entries_.empty() && std::abs(sum() - 1.0) > tolerance) {
    throw InvariantError("sparse distribution sums to " + std::to_string(sum()));
  }
}

float SparseDist::prob(TokenId id) const noexcept {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                             [](const Entry& e, TokenId v) { return e.first < v; });
  return (it != entries_.end() && it->first == id) ? it->second : 0.0f;
}

double SparseDist::sum() const noexcept {
  double s = 0.0;
  for (const auto& e : entries_) s += e.second;
  return s;
}

SparseDist normalize(std::span<const std::pair<TokenId, double>> weights) {
  std::map<TokenId, double> merged;
  double total = 0.0;
  for (const auto& [id, w] : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("normalize: negative or non-finite weight");
    merged[id] += w;
    total += w;
  }
  if (!(total > 0.0)) throw DataError("degenerate distribution");
  std::vector<SparseDist::Entry> entries;
  entries.reserve(merged.size());
  for (const auto& [id, w] : merged) {
    const auto p = static_cast<float>(w / total);
    if (p > 0.0f) entries.emplace_back(id, p);
  }
  return SparseDist(std::move(entries));
}

DenseDist normalize(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("normalize: negative or non-finite weight");
    total += w;
  }
  if (!(total > 0.0)) throw DataError("degenerate distribution");
  std::vector<float> probs(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    probs[i] = static_cast<float>(weights[i] / total);
  }
  return DenseDist(std::move(probs));
}

}  // namespace knnprompt
