#include "attnfold/proxy_task.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace attnfold {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

ProxySample gen_proxy_sample(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("proxy sample: n must be at least 2, got " + std::to_string(n));
  if (vocab < 2) throw std::invalid_argument("proxy sample: vocab must be at least 2");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  ProxySample s;
  s.n = n;
  s.tokens.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) s.tokens[i] = s.tokens[i + n] = tok(rng);
  return s;
}

void validate_proxy_sample(const ProxySample& sample, std::size_t vocab) {
  if (sample.tokens.size() != 2 * sample.n) throw std::invalid_argument("proxy sample: length is not 2n");
  for (std::size_t i = 0; i < sample.n; ++i) {
    if (sample.tokens[i] != sample.tokens[i + sample.n]) {
      throw std::invalid_argument("proxy sample: not periodic at index " + std::to_string(i));
    }
  }
  for (TokenId t : sample.tokens) {
    if (t >= vocab) throw std::invalid_argument("proxy sample: token " + std::to_string(t) + " outside vocabulary");
  }
}

double copy_accuracy(const Tensor& logits, const ProxySample& sample) {
  if (logits.rank() != 2 || logits.dim(0) != sample.tokens.size()) {
    throw std::invalid_argument("copy_accuracy: logits " + shape_str(logits.shape()) + " for a sample of length " +
                                std::to_string(sample.tokens.size()));
  }
  const std::size_t n = sample.n;
  std::size_t correct = 0;
  for (std::size_t p = n - 1; p <= 2 * n - 2; ++p) {
    auto row = logits.row(p);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == sample.tokens[p + 1]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

MarkovTable::MarkovTable(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), probs_(vocab * vocab), cdf_(vocab) {
  if (vocab < 2) throw std::invalid_argument("markov table: vocab must be at least 2");
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(kAlpha, 1.0);
  for (std::size_t r = 0; r < vocab; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs_[r * vocab + c] = gamma(rng);
      total += probs_[r * vocab + c];
    }
    if (total <= 0.0) {
      for (std::size_t c = 0; c < vocab; ++c) probs_[r * vocab + c] = 1.0;
      total = static_cast<double>(vocab);
    }
    auto& cdf = cdf_[r];
    cdf.resize(vocab);
    double acc = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs_[r * vocab + c] /= total;
      acc += probs_[r * vocab + c];
      cdf[c] = acc;
    }
    cdf.back() = 1.0;
  }
}

TokenId MarkovTable::sample_next(TokenId from, double u) const {
  const auto& cdf = cdf_.at(from);
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return static_cast<TokenId>(it - cdf.begin());
}

TokenSeq MarkovTable::rollout(std::size_t len, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> first(0, static_cast<TokenId>(vocab_ - 1));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  TokenSeq seq;
  seq.reserve(len);
  if (len == 0) return seq;
  seq.push_back(first(rng));
  while (seq.size() < len) seq.push_back(sample_next(seq.back(), unif(rng)));
  return seq;
}

double MarkovTable::rollout_entropy(std::size_t seq_len) const {
  if (seq_len < 2) return 0.0;
  std::vector<double> row_entropy(vocab_, 0.0);
  for (std::size_t r = 0; r < vocab_; ++r) {
    for (std::size_t c = 0; c < vocab_; ++c) {
      const double p = probs_[r * vocab_ + c];
      if (p > 0.0) row_entropy[r] -= p * std::log(p);
    }
  }
  std::vector<double> dist(vocab_, 1.0 / static_cast<double>(vocab_));
  std::vector<double> next(vocab_);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < seq_len; ++t) {
    for (std::size_t r = 0; r < vocab_; ++r) total += dist[r] * row_entropy[r];
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t r = 0; r < vocab_; ++r)
      for (std::size_t c = 0; c < vocab_; ++c) next[c] += dist[r] * probs_[r * vocab_ + c];
    dist.swap(next);
  }
  return total / static_cast<double>(seq_len - 1);
}

std::vector<TokenSeq> gen_mixture_corpus(const CorpusConfig& config, std::size_t vocab) {
  if (config.mix_ratio < 0.0 || config.mix_ratio > 1.0) {
    throw std::invalid_argument("corpus: mix_ratio must lie in [0,1]");
  }
  std::vector<TokenSeq> corpus;
  if (config.count == 0) return corpus;
  if (config.seq_len < 10) throw std::invalid_argument("corpus: seq_len must be at least 10");
  const MarkovTable table(vocab, config.markov_seed);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> half(5, config.seq_len / 2);
  corpus.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    const std::uint64_t s = derive_seed(config.seed, i);
    if (unif(rng) < config.mix_ratio) {
      corpus.push_back(gen_proxy_sample(half(rng), vocab, s).tokens);
    } else {
      corpus.push_back(table.rollout(config.seq_len, s));
    }
  }
  return corpus;
}

}  // namespace attnfold
