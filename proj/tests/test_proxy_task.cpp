#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "attnfold/proxy_task.hpp"

using namespace attnfold;

namespace {

Tensor rigged_logits(const TokenSeq& tokens, std::size_t vocab, std::size_t n, std::size_t miss_every = 0) {
  Tensor l({tokens.size(), vocab});
  for (std::size_t p = n - 1; p + 1 < tokens.size(); ++p) {
    const bool miss = miss_every && (p - (n - 1)) % miss_every == 0;
    l.at(p, miss ? (tokens[p + 1] + 1) % vocab : tokens[p + 1]) = 10.0F;
  }
  return l;
}

}  // namespace

TEST(ProxySample, TableOneExample) {
  ProxySample s{4, {0, 1, 2, 3, 0, 1, 2, 3}};
  EXPECT_NO_THROW(validate_proxy_sample(s, 8));
  // One-based position 5 is internal index 4; the next token is "B".
  EXPECT_EQ(s.tokens[4 + 1], 1U);
  EXPECT_EQ(s.target_index(), 3U);
  EXPECT_EQ(s.final_position(), 6U);
  EXPECT_EQ(s.target(), 3U);
}

TEST(ProxySample, IsPeriodicAndReproducible) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = gen_proxy_sample(2 + seed, 37, seed);
    ASSERT_EQ(s.tokens.size(), 2 * s.n);
    for (std::size_t i = 0; i < s.n; ++i) EXPECT_EQ(s.tokens[i], s.tokens[i + s.n]);
    EXPECT_NO_THROW(validate_proxy_sample(s, 37));
    EXPECT_EQ(s.tokens, gen_proxy_sample(2 + seed, 37, seed).tokens);
  }
}

TEST(ProxySample, RejectsDegenerateArguments) {
  EXPECT_THROW(gen_proxy_sample(1, 10, 0), std::invalid_argument);
  EXPECT_THROW(gen_proxy_sample(5, 1, 0), std::invalid_argument);
  ProxySample broken{3, {1, 2, 3, 1, 2, 4}};
  EXPECT_THROW(validate_proxy_sample(broken, 10), std::invalid_argument);
  ProxySample big{2, {1, 12, 1, 12}};
  EXPECT_THROW(validate_proxy_sample(big, 10), std::invalid_argument);
}

TEST(ProxySample, ShuffledFirstHalfIsStillValid) {
  auto s = gen_proxy_sample(10, 50, 3);
  std::reverse(s.tokens.begin(), s.tokens.begin() + 10);
  std::copy(s.tokens.begin(), s.tokens.begin() + 10, s.tokens.begin() + 10);
  EXPECT_NO_THROW(validate_proxy_sample(s, 50));
}

TEST(ProxySample, TokenFrequenciesAreUniformWithinThreeSigma) {
  const std::size_t V = 256, n = 50, samples = 1000;
  std::vector<std::size_t> counts(V, 0);
  for (std::size_t k = 0; k < samples; ++k) {
    const auto s = gen_proxy_sample(n, V, derive_seed(99, k));
    for (std::size_t i = 0; i < n; ++i) ++counts[s.tokens[i]];
  }
  const double draws = static_cast<double>(samples * n);
  const double p = 1.0 / static_cast<double>(V);
  const double mean = draws * p;
  const double sigma = std::sqrt(draws * p * (1.0 - p));
  std::size_t outside = 0;
  for (std::size_t c : counts) outside += std::abs(static_cast<double>(c) - mean) > 3.0 * sigma;
  // 3 sigma covers ~99.7% of bins; allow the expected handful of stragglers.
  EXPECT_LE(outside, 4U);
}

TEST(CopyAccuracy, RiggedCases) {
  const auto s = gen_proxy_sample(6, 30, 4);
  EXPECT_DOUBLE_EQ(copy_accuracy(rigged_logits(s.tokens, 30, 6), s), 1.0);

  ProxySample absent{4, {1, 2, 3, 4, 1, 2, 3, 4}};
  Tensor favor({8, 10});
  for (std::size_t p = 0; p < 8; ++p) favor.at(p, 9) = 5.0F;
  EXPECT_DOUBLE_EQ(copy_accuracy(favor, absent), 0.0);

  ProxySample three{3, {4, 5, 6, 4, 5, 6}};
  Tensor l = rigged_logits(three.tokens, 10, 3);
  l.at(3, 5) = 0.0F;
  l.at(3, 9) = 1.0F;
  EXPECT_NEAR(copy_accuracy(l, three), 2.0 / 3.0, 1e-12);

  EXPECT_THROW(copy_accuracy(Tensor({5, 10}), three), std::invalid_argument);
}

TEST(CopyAccuracy, InvariantUnderMonotoneTransform) {
  const auto s = gen_proxy_sample(8, 30, 5);
  Tensor l = rigged_logits(s.tokens, 30, 8, 3);
  for (std::size_t i = 0; i < l.numel(); ++i) l[i] += 0.01F * static_cast<float>(i % 7);
  Tensor t = l;
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std::exp(t[i] / 3.0F) - 2.0F;
  EXPECT_DOUBLE_EQ(copy_accuracy(l, s), copy_accuracy(t, s));
}

TEST(MarkovTable, RowsAreStochastic) {
  const MarkovTable m(64, 7);
  for (TokenId a = 0; a < 64; ++a) {
    double tot = 0.0;
    for (TokenId b = 0; b < 64; ++b) tot += m.prob(a, b);
    EXPECT_NEAR(tot, 1.0, 1e-6);
  }
}

TEST(Corpus, AllCopySequencesWhenMixIsOne) {
  CorpusConfig c;
  c.mix_ratio = 1.0;
  c.count = 300;
  c.seq_len = 40;
  const auto corpus = gen_mixture_corpus(c, 50);
  ASSERT_EQ(corpus.size(), 300U);
  for (const auto& s : corpus) {
    ASSERT_EQ(s.size() % 2, 0U);
    const std::size_t n = s.size() / 2;
    EXPECT_GE(n, 5U);
    EXPECT_LE(n, 20U);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(s[i], s[i + n]);
  }
}

TEST(Corpus, MarkovBigramsMatchTable) {
  const std::size_t V = 32;
  CorpusConfig c;
  c.mix_ratio = 0.0;
  c.seq_len = 100;
  c.count = 1000;  // 10^5 tokens
  const auto corpus = gen_mixture_corpus(c, V);
  const MarkovTable table(V, c.markov_seed);
  std::vector<std::vector<double>> counts(V, std::vector<double>(V, 0.0));
  for (const auto& s : corpus) {
    ASSERT_EQ(s.size(), 100U);
    for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[s[i]][s[i + 1]] += 1.0;
  }
  std::size_t checked = 0;
  for (std::size_t a = 0; a < V; ++a) {
    double visits = 0.0;
    for (double x : counts[a]) visits += x;
    if (visits < 500) continue;
    ++checked;
    double tv = 0.0;
    for (std::size_t b = 0; b < V; ++b) {
      tv += std::abs(counts[a][b] / visits - table.prob(static_cast<TokenId>(a), static_cast<TokenId>(b)));
    }
    EXPECT_LE(0.5 * tv, 0.05) << "row " << a;
  }
  EXPECT_GT(checked, 0U);
}

TEST(Corpus, ZeroCountIsEmptyAndSeedsReproduce) {
  CorpusConfig c;
  c.count = 0;
  EXPECT_TRUE(gen_mixture_corpus(c, 20).empty());
  c.count = 50;
  c.seq_len = 30;
  EXPECT_EQ(gen_mixture_corpus(c, 20), gen_mixture_corpus(c, 20));
}
