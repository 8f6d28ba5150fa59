#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "knnprompt/core.hpp"
#include "knnprompt/datastore.hpp"

namespace knnprompt {

struct Neighbor {
  std::uint64_t entry_index = 0;
  float sq_dist = 0.0f;
  TokenId value = 0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Ascending by (sq_dist, entry_index); entry indices unique.
using NeighborSet = std::vector<Neighbor>;

inline bool neighbor_less(const Neighbor& a, const Neighbor& b) noexcept {
  return a.sq_dist != b.sq_dist ? a.sq_dist < b.sq_dist : a.entry_index < b.entry_index;
}

// Squared L2 accumulated in f64 in index order, rounded to f32 once.
float squared_l2(std::span<const float> a, std::span<const float> b) noexcept;

// Exact search: the min(k, size) entries closest to `query`.
NeighborSet flat_search(const Datastore& store, std::span<const float> query, std::size_t k);

struct IvfParams {
  std::size_t nlist = 1;
  std::uint64_t seed = 0;
  std::size_t kmeans_iters = 20;
  std::size_t workers = 1;
};

// Inverted file over a datastore: k-means cells plus per-cell entry lists.
class IvfIndex {
 public:
  IvfIndex(std::size_t dim, std::uint64_t seed, std::vector<float> centroids,
           std::vector<std::vector<std::uint64_t>> lists);

  std::size_t nlist() const noexcept { return lists_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t size() const noexcept { return size_; }

  std::span<const float> centroid(std::size_t list) const {
    return std::span<const float>(centroids_).subspan(list * dim_, dim_);
  }
  std::span<const float> centroids() const noexcept { return centroids_; }
  std::span<const std::uint64_t> list(std::size_t i) const { return lists_[i]; }

  // Per-entry list id.
  std::vector<std::uint32_t> assignments() const;

  // "KNNI" version 1, little-endian: magic, u32 version, u32 nlist, u32 dim,
  // u64 kmeans_seed, nlist x dim f32 centroids, then per list a u64 length
  // followed by that many u64 entry indices.
  void save(const std::filesystem::path& path) const;
  static IvfIndex load(const std::filesystem::path& path);

  friend bool operator==(const IvfIndex&, const IvfIndex&) = default;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<float> centroids_;
  std::vector<std::vector<std::uint64_t>> lists_;
  std::size_t size_ = 0;
};

// Lloyd's k-means seeded with `nlist` distinct random entries. Deterministic
// for a given seed, whatever the worker count.
IvfIndex ivf_build(const Datastore& store, const IvfParams& params);

// Exact search restricted to the `nprobe` cells whose centroids are nearest
// the query. May return fewer than k neighbors.
NeighborSet ivf_search(const IvfIndex& index, const Datastore& store, std::span<const float> query,
                       std::size_t k, std::size_t nprobe);

// Mean over queries of |ivf ∩ flat| / |flat|.
double recall_at_k(const IvfIndex& index, const Datastore& store, std::span<const Embedding> queries,
                   std::size_t k, std::size_t nprobe);

// Flat or IVF retrieval over one datastore.
class Retriever {
 public:
  explicit Retriever(const Datastore& store) : store_(&store) {}
  Retriever(const Datastore& store, const IvfIndex& index, std::size_t nprobe);

  NeighborSet search(std::span<const float> query, std::size_t k) const;
  const Datastore& store() const noexcept { return *store_; }
  bool approximate() const noexcept { return index_ != nullptr; }

 private:
  const Datastore* store_;
  const IvfIndex* index_ = nullptr;
  std::size_t nprobe_ = 0;
};

}  // namespace knnprompt
