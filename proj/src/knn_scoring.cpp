#include "knnprompt/knn_scoring.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "knnprompt/errors.hpp"

namespace knnprompt {

void RetrievalConfig::validate() const {
  if (k < 1) throw ConfigError("retrieval: k must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("retrieval: temperature must be positive");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("retrieval: lambda must be in [0, 1]");
  if (nprobe && *nprobe < 1) throw ConfigError("retrieval: nprobe must be >= 1");
}

SparseDist knn_distribution(std::span<const Neighbor> neighbors, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("knn_distribution: temperature must be positive");
  if (neighbors.empty()) return SparseDist{};

  // Shift by the minimum distance; the softmax is invariant to it.
  float min_d = neighbors.front().sq_dist;
  for (const auto& n : neighbors) min_d = std::min(min_d, n.sq_dist);

  std::map<TokenId, double> weights;
  for (const auto& n : neighbors) {
    const double shifted = static_cast<double>(n.sq_dist) - static_cast<double>(min_d);
    weights[n.value] += std::exp(-shifted / temperature);
  }
  std::vector<std::pair<TokenId, double>> flat(weights.begin(), weights.end());
  return normalize(flat);
}

DenseDist interpolate(const DenseDist& p_lm, const SparseDist& p_knn, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("interpolate: lambda must be in [0, 1]");
  if (p_knn.empty()) return p_lm;

  const auto lm = p_lm.probs();
  std::vector<float> out(lm.size());
  const double keep = 1.0 - lambda;
  for (std::size_t v = 0; v < lm.size(); ++v) out[v] = static_cast<float>(keep * lm[v]);
  for (const auto& [id, p] : p_knn.entries()) {
    if (id >= out.size()) {
      throw InvariantError("interpolate: kNN token " + std::to_string(id) + " outside LM vocab");
    }
    out[id] = static_cast<float>(keep * lm[id] + lambda * p);
  }
  return DenseDist::adopt(std::move(out));
}

}  // namespace knnprompt
