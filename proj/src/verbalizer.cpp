#include "knnprompt/verbalizer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "knnprompt/errors.hpp"

namespace knnprompt {

namespace {

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

// Single normalized token for `word`, or empty if it normalizes to 0 or >1 pieces.
std::optional<std::string> single_piece(std::string_view word) {
  auto pieces = normalize_pieces(word);
  if (pieces.size() != 1) return std::nullopt;
  return std::move(pieces.front());
}

}  // namespace

WordVectors::WordVectors(std::map<std::string, std::vector<float>> vectors) : vectors_(std::move(vectors)) {
  for (const auto& [word, v] : vectors_) {
    if (v.empty()) throw DataError("word vectors: empty vector for '" + word + "'");
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_) throw DataError("word vectors: dimension mismatch at '" + word + "'");
    if (!all_finite(v)) throw DataError("word vectors: non-finite value for '" + word + "'");
  }
}

WordVectors WordVectors::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::kIo, "cannot open word vectors " + path.string());
  std::map<std::string, std::vector<float>> vectors;
  std::size_t dim = 0;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = strip_cr(std::move(line));
    std::istringstream fields(line);
    std::string word;
    if (!(fields >> word)) continue;
    std::vector<float> v;
    std::string tok;
    while (fields >> tok) {
      float x = 0.0f;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(x)) {
        throw FormatError(FormatErrc::kMalformed, where(path, lineno) + ": bad number '" + tok + "'");
      }
      v.push_back(x);
    }
    if (v.empty()) throw FormatError(FormatErrc::kMalformed, where(path, lineno) + ": no components");
    if (dim == 0) dim = v.size();
    if (v.size() != dim) {
      throw FormatError(FormatErrc::kInvalidDimension, where(path, lineno) + ": expected " +
                                                           std::to_string(dim) + " components, got " +
                                                           std::to_string(v.size()));
    }
    // First occurrence wins, as in GloVe files with duplicated rows.
    vectors.emplace(std::move(word), std::move(v));
  }
  return WordVectors(std::move(vectors));
}

const std::vector<float>* WordVectors::find(std::string_view word) const {
  auto it = vectors_.find(std::string(word));
  return it == vectors_.end() ? nullptr : &it->second;
}

SynonymLexicon SynonymLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::kIo, "cannot open synonym lexicon " + path.string());
  SynonymLexicon lex;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = strip_cr(std::move(line));
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size() ||
        line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError(FormatErrc::kMalformed, where(path, lineno) + ": expected word<TAB>synonym");
    }
    lex.add(line.substr(0, tab), line.substr(tab + 1));
  }
  return lex;
}

void SynonymLexicon::add(const std::string& word, const std::string& synonym) {
  synonyms_[word].insert(synonym);
}

const std::set<std::string>* SynonymLexicon::find(std::string_view word) const {
  auto it = synonyms_.find(std::string(word));
  return it == synonyms_.end() ? nullptr : &it->second;
}

std::vector<std::string> top_k_similar(const WordVectors& vectors, std::string_view word, std::size_t k) {
  const auto* query = vectors.find(word);
  if (query == nullptr) throw DataError("no vector for word '" + std::string(word) + "'");

  auto norm = [](const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
  };
  const double qn = norm(*query);

  std::vector<std::pair<double, const std::string*>> scored;
  scored.reserve(vectors.size());
  for (const auto& [w, v] : vectors.entries()) {
    if (w == word) continue;
    const double vn = norm(v);
    double cos = 0.0;
    if (qn > 0.0 && vn > 0.0) {
      double dot = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) dot += static_cast<double>(v[i]) * (*query)[i];
      cos = dot / (qn * vn);
    }
    scored.emplace_back(cos, &w);
  }
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first > b.first : *a.second < *b.second;
                    });
  std::vector<std::string> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(*scored[i].second);
  return out;
}

Neighborhood resolve_words(std::span<const std::string> words, const Vocab& vocab) {
  Neighborhood out;
  for (const auto& w : words) {
    const auto piece = single_piece(w);
    if (!piece) continue;
    if (const auto id = vocab.find(*piece); id && *id != kUnkId) out.push_back(*id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Neighborhood build_neighborhood(const WordVectors& vectors, const SynonymLexicon& lexicon,
                                std::string_view verbalizer_token, const Vocab& vocab) {
  const auto self = single_piece(verbalizer_token);
  const auto self_id = self ? vocab.find(*self) : std::nullopt;
  if (!self_id || *self_id == kUnkId) {
    throw ConfigError("verbalizer token '" + std::string(verbalizer_token) + "' is not a single vocab token");
  }

  std::vector<std::string> expansions;
  if (vectors.find(*self) != nullptr) expansions = top_k_similar(vectors, *self, kFuzzyTopK);
  if (const auto* syn = lexicon.find(*self)) expansions.insert(expansions.end(), syn->begin(), syn->end());

  Neighborhood out = resolve_words(expansions, vocab);
  out.push_back(*self_id);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

bool coverage(const SparseDist& p_knn, std::span<const Neighborhood> label_sets) {
  if (p_knn.empty()) return false;
  for (const auto& set : label_sets) {
    for (TokenId t : set) {
      if (p_knn.contains(t)) return true;
    }
  }
  return false;
}

}  // namespace knnprompt
