#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "attnfold/model.hpp"
#include "attnfold/tensor.hpp"

namespace attnfold {

// A random half of n tokens followed by an exact copy of itself.
struct ProxySample {
  std::size_t n = 0;
  TokenSeq tokens;

  // Internal index of the copy target x_n and of the final query position.
  std::size_t target_index() const { return n - 1; }
  std::size_t final_position() const { return 2 * n - 2; }
  TokenId target() const { return tokens[target_index()]; }
};

ProxySample gen_proxy_sample(std::size_t n, std::size_t vocab, std::uint64_t seed);

// Checks the periodicity and vocabulary invariants; throws on violation.
void validate_proxy_sample(const ProxySample& sample, std::size_t vocab);

// Fraction of positions p in [n-1, 2n-2] whose argmax equals tokens[p+1].
double copy_accuracy(const Tensor& logits, const ProxySample& sample);

struct CorpusConfig {
  std::uint64_t markov_seed = 7;
  double mix_ratio = 0.9;
  std::size_t seq_len = 128;
  std::size_t count = 20000;
  std::uint64_t seed = 11;
  bool operator==(const CorpusConfig&) const = default;
};

// Row-stochastic V×V transition table, each row a symmetric Dirichlet(0.3) draw.
class MarkovTable {
 public:
  static constexpr double kAlpha = 0.3;

  MarkovTable(std::size_t vocab, std::uint64_t seed);

  std::size_t vocab() const { return vocab_; }
  double prob(TokenId from, TokenId to) const { return probs_[from * vocab_ + to]; }
  // Next token for a uniform draw u in [0,1).
  TokenId sample_next(TokenId from, double u) const;

  // Expected per-position next-token entropy of a rollout of seq_len tokens
  // whose first token is uniform: the loss floor for a model that
  // implements the table exactly.
  double rollout_entropy(std::size_t seq_len) const;

  TokenSeq rollout(std::size_t len, std::uint64_t seed) const;

 private:
  std::size_t vocab_;
  std::vector<double> probs_;
  std::vector<std::vector<double>> cdf_;
};

std::vector<TokenSeq> gen_mixture_corpus(const CorpusConfig& config, std::size_t vocab);

// Reproducible per-index seed derived from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace attnfold
