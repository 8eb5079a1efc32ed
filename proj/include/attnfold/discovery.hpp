#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "attnfold/model.hpp"
#include "attnfold/proxy_task.hpp"

namespace attnfold {

struct DiscoveryConfig {
  std::vector<std::size_t> n_values{10, 15, 25, 50};
  std::size_t samples_per_n = 200;
  std::size_t K = 4;
  double epsilon = 1e-6;
  bool correct_only = true;

  // Default n grid for a position-encoding family; linear bias uses longer copies.
  static DiscoveryConfig defaults_for(PositionEncoding pe);
  void validate(const ModelConfig& model) const;
  bool operator==(const DiscoveryConfig&) const = default;
};

// Row-major L×H matrix of per-head scores.
struct HeadMatrix {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> values;

  HeadMatrix() = default;
  HeadMatrix(std::size_t layers, std::size_t heads) : n_layers(layers), n_heads(heads), values(layers * heads, 0.0) {}
  double& at(std::size_t l, std::size_t h) { return values[l * n_heads + h]; }
  double at(std::size_t l, std::size_t h) const { return values[l * n_heads + h]; }
};

struct DeltaPiReport {
  HeadMatrix scores;
  std::vector<HeadMatrix> per_n_scores;
  // Standard error of each aggregated score, from the per-n sample spread.
  HeadMatrix standard_error;
  std::vector<std::size_t> used_per_n;
  std::size_t skipped = 0;
  DiscoveryConfig config;
  std::uint64_t seed = 0;
};

// Heads ordered by descending score.
using HeadSet = std::vector<HeadId>;

// Per-head mean contribution over all positions, indexed layer*H+head.
std::vector<std::vector<float>> head_means(const HeadCaptures& captures);

// Relative change of the copy-target logit at the final position when each
// head's contribution there is replaced by its own sequence mean. Returns
// nullopt when the sample is filtered out.
std::optional<HeadMatrix> delta_pi_sample(const TransformerWeights& weights, const ProxySample& sample,
                                          double epsilon = 1e-6, bool correct_only = true);

DeltaPiReport aggregate_discovery(const TransformerWeights& weights, const DiscoveryConfig& config,
                                  std::uint64_t seed);

HeadSet select_top_k(const DeltaPiReport& report, std::ptrdiff_t K);

}  // namespace attnfold
