#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "knnprompt/ann_index.hpp"
#include "knnprompt/core.hpp"

namespace knnprompt {

// Retrieval hyperparameters. Defaults: 1024 neighbors, temperature 3,
// interpolation weight 0.3.
struct RetrievalConfig {
  std::size_t k = 1024;
  double temperature = 3.0;
  double lambda = 0.3;
  std::optional<std::size_t> nprobe;

  // Throws ConfigError unless k >= 1, temperature > 0 and lambda in [0, 1].
  void validate() const;
};

// P_kNN(v) ∝ Σ_{neighbors with value v} exp(-sq_dist / temperature).
// An empty neighbor set yields an empty SparseDist ("no kNN mass").
SparseDist knn_distribution(std::span<const Neighbor> neighbors, double temperature);

// (1 - lambda) * p_lm + lambda * p_knn. An empty p_knn returns p_lm unchanged.
DenseDist interpolate(const DenseDist& p_lm, const SparseDist& p_knn, double lambda);

}  // namespace knnprompt
