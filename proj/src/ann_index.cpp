#include "knnprompt/ann_index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "binary_io.hpp"
#include "knnprompt/errors.hpp"
#include "knnprompt/rng.hpp"

namespace knnprompt {

namespace {

constexpr std::string_view kIndexMagic = "KNNI";
constexpr std::uint32_t kIndexVersion = 1;

void check_query(const Datastore& store, std::span<const float> query, std::size_t k) {
  if (query.size() != store.dim()) {
    throw ConfigError("search: query dim " + std::to_string(query.size()) + " does not match datastore dim " +
                      std::to_string(store.dim()));
  }
  if (k == 0) throw ConfigError("search: k must be >= 1");
}

// Bounded max-heap keeping the k smallest neighbors seen so far.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { heap_.reserve(std::min<std::size_t>(k, 4096)); }

  void offer(const Neighbor& n) {
    if (heap_.size() < k_) {
      heap_.push_back(n);
      std::push_heap(heap_.begin(), heap_.end(), neighbor_less);
    } else if (neighbor_less(n, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), neighbor_less);
      heap_.back() = n;
      std::push_heap(heap_.begin(), heap_.end(), neighbor_less);
    }
  }

  NeighborSet take() && {
    std::sort_heap(heap_.begin(), heap_.end(), neighbor_less);
    return std::move(heap_);
  }

 private:
  std::size_t k_;
  NeighborSet heap_;
};

// Runs fn(begin, end) over [0, n) split into contiguous blocks.
template <typename Fn>
void parallel_blocks(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t block = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * block;
    const std::size_t end = std::min(n, begin + block);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

std::uint32_t nearest_centroid(std::span<const float> x, std::span<const float> centroids, std::size_t dim) {
  const std::size_t nlist = centroids.size() / dim;
  std::uint32_t best = 0;
  float best_d = INFINITY;
  for (std::size_t c = 0; c < nlist; ++c) {
    const float d = squared_l2(x, centroids.subspan(c * dim, dim));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

}  // namespace

float squared_l2(std::span<const float> a, std::span<const float> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return static_cast<float>(s);
}

NeighborSet flat_search(const Datastore& store, std::span<const float> query, std::size_t k) {
  check_query(store, query, k);
  TopK top(k);
  for (std::size_t i = 0; i < store.size(); ++i) {
    top.offer(Neighbor{i, squared_l2(store.key(i), query), store.value(i)});
  }
  return std::move(top).take();
}

// ---------------------------------------------------------------------------
// IvfIndex

IvfIndex::IvfIndex(std::size_t dim, std::uint64_t seed, std::vector<float> centroids,
                   std::vector<std::vector<std::uint64_t>> lists)
    : dim_(dim), seed_(seed), centroids_(std::move(centroids)), lists_(std::move(lists)) {
  if (dim_ == 0) throw ConfigError("ivf: invalid dimension 0");
  if (lists_.empty()) throw ConfigError("ivf: nlist must be >= 1");
  if (centroids_.size() != lists_.size() * dim_) throw InvariantError("ivf: centroid matrix has wrong size");
  if (!all_finite(centroids_)) throw InvariantError("ivf: non-finite centroid");
  for (const auto& l : lists_) size_ += l.size();
  std::vector<bool> seen(size_, false);
  for (const auto& l : lists_) {
    for (auto e : l) {
      if (e >= size_ || seen[e]) throw InvariantError("ivf: lists are not a partition of the entries");
      seen[e] = true;
    }
  }
}

std::vector<std::uint32_t> IvfIndex::assignments() const {
  std::vector<std::uint32_t> out(size_);
  for (std::size_t l = 0; l < lists_.size(); ++l) {
    for (auto e : lists_[l]) out[e] = static_cast<std::uint32_t>(l);
  }
  return out;
}

void IvfIndex::save(const std::filesystem::path& path) const {
  detail::BinaryWriter w(path);
  w.magic(kIndexMagic);
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(lists_.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
  w.put<std::uint64_t>(seed_);
  w.put_all<float>(centroids_);
  for (const auto& l : lists_) {
    w.put<std::uint64_t>(l.size());
    w.put_all<std::uint64_t>(l);
  }
  w.finish();
}

IvfIndex IvfIndex::load(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kIndexMagic);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kIndexVersion) {
    throw FormatError(FormatErrc::kUnsupportedVersion,
                      in.path() + ": unsupported version " + std::to_string(version));
  }
  const auto nlist = in.get<std::uint32_t>("nlist");
  const auto dim = in.get<std::uint32_t>("dim");
  if (dim == 0) throw FormatError(FormatErrc::kInvalidDimension, in.path() + ": invalid dimension 0");
  if (nlist == 0) throw FormatError(FormatErrc::kMalformed, in.path() + ": nlist 0");
  const auto seed = in.get<std::uint64_t>("kmeans_seed");
  if (std::uint64_t{nlist} * dim * 4 > in.remaining()) {
    throw FormatError(FormatErrc::kTruncated,
                      in.path() + ": truncated file: expected at least " +
                          std::to_string(in.offset() + std::uint64_t{nlist} * dim * 4) + " bytes, got " +
                          std::to_string(in.size()));
  }
  std::vector<float> centroids(std::size_t{nlist} * dim);
  in.get_all<float>(centroids, "centroids");
  std::vector<std::vector<std::uint64_t>> lists(nlist);
  for (auto& l : lists) {
    const auto len = in.get<std::uint64_t>("list length");
    if (len > in.remaining() / 8) {
      throw FormatError(FormatErrc::kTruncated,
                        in.path() + ": truncated file: list of " + std::to_string(len) + " entries at offset " +
                            std::to_string(in.offset()) + ", expected " +
                            std::to_string(in.offset() + len * 8) + " bytes, got " + std::to_string(in.size()));
    }
    l.resize(len);
    in.get_all<std::uint64_t>(l, "list entries");
  }
  in.expect_end();
  try {
    return IvfIndex(dim, seed, std::move(centroids), std::move(lists));
  } catch (const Error& e) {
    throw FormatError(FormatErrc::kMalformed, in.path() + ": " + e.what());
  }
}

IvfIndex ivf_build(const Datastore& store, const IvfParams& params) {
  const std::size_t n = store.size();
  const std::size_t dim = store.dim();
  const std::size_t nlist = params.nlist;
  if (nlist < 1) throw ConfigError("ivf_build: nlist must be >= 1");
  if (n < nlist) {
    throw ConfigError("ivf_build: datastore has " + std::to_string(n) + " entries, fewer than nlist " +
                      std::to_string(nlist));
  }

  // Distinct random entries via a partial Fisher-Yates shuffle.
  SplitMix64 rng(params.seed);
  std::vector<std::uint64_t> order(n);
  std::iota(order.begin(), order.end(), std::uint64_t{0});
  std::vector<float> centroids(nlist * dim);
  for (std::size_t c = 0; c < nlist; ++c) {
    const std::size_t j = c + static_cast<std::size_t>(rng.bounded(n - c));
    std::swap(order[c], order[j]);
    const auto key = store.key(order[c]);
    std::copy(key.begin(), key.end(), centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }

  std::vector<std::uint32_t> assign(n);
  auto assign_all = [&] {
    parallel_blocks(n, params.workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) assign[i] = nearest_centroid(store.key(i), centroids, dim);
    });
  };

  std::vector<double> sums(nlist * dim);
  std::vector<std::size_t> counts(nlist);
  for (std::size_t iter = 0; iter < params.kmeans_iters; ++iter) {
    assign_all();
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto key = store.key(i);
      double* s = sums.data() + std::size_t{assign[i]} * dim;
      for (std::size_t j = 0; j < dim; ++j) s[j] += key[j];
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < nlist; ++c) {
      if (counts[c] == 0) continue;  // empty cell keeps its centroid
      for (std::size_t j = 0; j < dim; ++j) {
        centroids[c * dim + j] = static_cast<float>(sums[c * dim + j] / static_cast<double>(counts[c]));
      }
    }
  }
  assign_all();

  std::vector<std::vector<std::uint64_t>> lists(nlist);
  for (std::size_t i = 0; i < n; ++i) lists[assign[i]].push_back(i);
  return IvfIndex(dim, params.seed, std::move(centroids), std::move(lists));
}

NeighborSet ivf_search(const IvfIndex& index, const Datastore& store, std::span<const float> query,
                       std::size_t k, std::size_t nprobe) {
  check_query(store, query, k);
  if (index.dim() != store.dim() || index.size() != store.size()) {
    throw ConfigError("ivf_search: index was not built over this datastore");
  }
  if (nprobe < 1 || nprobe > index.nlist()) {
    throw ConfigError("ivf_search: nprobe must be in [1, " + std::to_string(index.nlist()) + "]");
  }
  std::vector<std::pair<float, std::uint32_t>> cells(index.nlist());
  for (std::size_t c = 0; c < index.nlist(); ++c) {
    cells[c] = {squared_l2(index.centroid(c), query), static_cast<std::uint32_t>(c)};
  }
  std::partial_sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(nprobe), cells.end());

  TopK top(k);
  for (std::size_t p = 0; p < nprobe; ++p) {
    for (auto e : index.list(cells[p].second)) {
      top.offer(Neighbor{e, squared_l2(store.key(e), query), store.value(e)});
    }
  }
  return std::move(top).take();
}

double recall_at_k(const IvfIndex& index, const Datastore& store, std::span<const Embedding> queries,
                   std::size_t k, std::size_t nprobe) {
  if (queries.empty()) throw ConfigError("recall_at_k: no queries");
  double total = 0.0;
  for (const auto& q : queries) {
    const auto exact = flat_search(store, q, k);
    const auto approx = ivf_search(index, store, q, k, nprobe);
    if (exact.empty()) {
      total += 1.0;
      continue;
    }
    std::unordered_set<std::uint64_t> truth;
    for (const auto& n : exact) truth.insert(n.entry_index);
    std::size_t hits = 0;
    for (const auto& n : approx) hits += truth.count(n.entry_index);
    total += static_cast<double>(hits) / static_cast<double>(exact.size());
  }
  return total / static_cast<double>(queries.size());
}

// ---------------------------------------------------------------------------
// Retriever

Retriever::Retriever(const Datastore& store, const IvfIndex& index, std::size_t nprobe)
    : store_(&store), index_(&index), nprobe_(nprobe) {
  if (index.dim() != store.dim() || index.size() != store.size()) {
    throw ConfigError("retriever: index was not built over this datastore");
  }
  if (nprobe < 1 || nprobe > index.nlist()) {
    throw ConfigError("retriever: nprobe must be in [1, " + std::to_string(index.nlist()) + "]");
  }
}

NeighborSet Retriever::search(std::span<const float> query, std::size_t k) const {
  if (index_ != nullptr) return ivf_search(*index_, *store_, query, k, nprobe_);
  return flat_search(*store_, query, k);
}

}  // namespace knnprompt
