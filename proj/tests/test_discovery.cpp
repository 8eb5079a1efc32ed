#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "attnfold/discovery.hpp"
#include "test_util.hpp"

using namespace attnfold;
using attnfold::testing::scaled_model;
using attnfold::testing::tiny_config;

namespace {

HeadCaptures random_captures(std::size_t layers, std::size_t heads, std::size_t t, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HeadCaptures c;
  c.n_layers = layers;
  c.n_heads = heads;
  for (std::size_t i = 0; i < layers * heads; ++i) c.contributions.push_back(attnfold::testing::random_tensor({t, d}, rng));
  return c;
}

ModelConfig one_layer_two_heads(PositionEncoding pe) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_model = 8;
  c.vocab = 12;
  c.max_len = 32;
  c.d_ff = 16;
  c.pe = pe;
  c.seed = 17;
  return c;
}

DeltaPiReport hand_report(std::size_t L, std::size_t H, std::vector<double> values) {
  DeltaPiReport r;
  r.scores = HeadMatrix(L, H);
  r.scores.values = std::move(values);
  return r;
}

}  // namespace

TEST(HeadMeans, ConstantAndAlternatingContributions) {
  HeadCaptures c;
  c.n_layers = 1;
  c.n_heads = 2;
  Tensor same({6, 3}), alt({6, 3});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      same.at(i, j) = 0.25F * static_cast<float>(j + 1);
      alt.at(i, j) = (i % 2 ? -1.0F : 1.0F) * static_cast<float>(j + 2);
    }
  c.contributions = {same, alt};
  const auto m = head_means(c);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(m[0][j], 0.25F * static_cast<float>(j + 1));
    EXPECT_EQ(m[1][j], 0.0F);
  }
}

TEST(HeadMeans, MatchesPositionLoopOracle) {
  const auto c = random_captures(2, 3, 37, 16, 5);
  const auto m = head_means(c);
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t j = 0; j < 16; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 37; ++i) acc += c.contributions[k].at(i, j);
      EXPECT_NEAR(m[k][j], acc / 37.0, 1e-6);
    }
}

TEST(DeltaPi, ZeroOutputProjectionGivesZeroEverywhere) {
  auto w = scaled_model(tiny_config(), 10.0F);
  for (auto& L : w.layers) std::fill(L.w_o.data().begin(), L.w_o.data().end(), 0.0F);
  const auto s = gen_proxy_sample(6, 20, 3);
  const auto dp = delta_pi_sample(w, s, 1e-6, false);
  ASSERT_TRUE(dp);
  for (double v : dp->values) EXPECT_EQ(v, 0.0);
}

TEST(DeltaPi, HeadWhoseContributionIsItsMeanScoresZero) {
  auto w = scaled_model(tiny_config(), 10.0F);
  // Head 2 of layer 0 writes nothing, so its value at every position equals its mean.
  auto& w_o = w.layers[0].w_o;
  for (std::size_t r = 2 * 4; r < 3 * 4; ++r) std::fill(w_o.row(r).begin(), w_o.row(r).end(), 0.0F);
  const auto dp = delta_pi_sample(w, gen_proxy_sample(7, 20, 4), 1e-6, false);
  ASSERT_TRUE(dp);
  EXPECT_EQ(dp->at(0, 2), 0.0);
}

TEST(DeltaPi, MatchesSpliceAndRerunOracle) {
  for (auto pe : {PositionEncoding::kLearnable, PositionEncoding::kRotary, PositionEncoding::kLinearBias}) {
    const auto w = scaled_model(one_layer_two_heads(pe), 12.0F);
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = gen_proxy_sample(5 + seed % 4, 12, seed);
      const auto dp = delta_pi_sample(w, s, 1e-6, false);
      if (!dp) continue;
      std::vector<attnfold::testing::Mat> contrib;
      const auto base = attnfold::testing::oracle_forward(w, s.tokens, {}, &contrib);
      const std::size_t pos = s.final_position();
      const double pi = base[pos][s.target()];
      for (std::size_t h = 0; h < 2; ++h) {
        std::vector<double> mean(8, 0.0);
        for (const auto& row : contrib[h])
          for (std::size_t j = 0; j < 8; ++j) mean[j] += row[j] / static_cast<double>(s.tokens.size());
        const auto spliced = attnfold::testing::oracle_forward(w, s.tokens, {{0, h, pos, mean}});
        const double expected = spliced[pos][s.target()] / pi - 1.0;
        EXPECT_NEAR(dp->at(0, h), expected, 1e-6 * std::max(1.0, std::abs(expected))) << to_string(pe) << " seed " << seed << " head " << h;
      }
      ++checked;
    }
    EXPECT_GE(checked, 5U);
  }
}

TEST(DeltaPi, FiltersSamplesThatFailOrHaveTinyBaselines) {
  const auto w = init_model(tiny_config());
  const auto s = gen_proxy_sample(6, 20, 9);
  EXPECT_FALSE(delta_pi_sample(w, s, 1e9, false));
  // An untrained model predicts the copy target by chance at best.
  std::size_t kept = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) kept += delta_pi_sample(w, gen_proxy_sample(6, 20, seed), 1e-6, true).has_value();
  EXPECT_LT(kept, 20U);
}

TEST(DeltaPi, IntervenedRunKeepsEarlierLayersBitwise) {
  const auto w = scaled_model(tiny_config(PositionEncoding::kRotary), 10.0F);
  const auto s = gen_proxy_sample(8, 20, 2);
  ForwardOptions o;
  o.record_captures = true;
  const auto base = forward(w, s.tokens, o);
  const auto means = head_means(*base.captures);
  std::vector<InterventionSpec> iv{{{1, 2}, s.final_position(), means[1 * 4 + 2]}};
  ForwardOptions oi;
  oi.record_captures = true;
  oi.interventions = iv;
  const auto moved = forward(w, s.tokens, oi);
  for (std::size_t h = 0; h < 4; ++h) EXPECT_TRUE(moved.captures->at(0, h).bitwise_equal(base.captures->at(0, h)));
  EXPECT_TRUE(moved.captures->attention_out[0].bitwise_equal(base.captures->attention_out[0]));
}

TEST(Aggregate, SingleSampleEqualsSampleMatrix) {
  const auto w = scaled_model(tiny_config(), 10.0F);
  DiscoveryConfig c;
  c.n_values = {7};
  c.samples_per_n = 1;
  c.correct_only = false;
  const auto rep = aggregate_discovery(w, c, 33);
  const auto dp = delta_pi_sample(w, gen_proxy_sample(7, 20, derive_seed(33, 7, 0)), c.epsilon, false);
  ASSERT_TRUE(dp);
  EXPECT_EQ(rep.scores.values, dp->values);
  ASSERT_EQ(rep.per_n_scores.size(), 1U);
  EXPECT_EQ(rep.skipped, 0U);
}

TEST(Aggregate, ScoresAreMeanOfPerNScoresAndDeterministic) {
  const auto w = scaled_model(tiny_config(), 10.0F);
  DiscoveryConfig c;
  c.n_values = {5, 9, 12};
  c.samples_per_n = 6;
  c.correct_only = false;
  const auto a = aggregate_discovery(w, c, 4);
  const auto b = aggregate_discovery(w, c, 4);
  EXPECT_EQ(a.scores.values, b.scores.values);
  for (std::size_t i = 0; i < a.scores.values.size(); ++i) {
    double m = 0.0;
    for (const auto& p : a.per_n_scores) m += p.values[i];
    EXPECT_NEAR(a.scores.values[i], m / 3.0, 1e-12);
    EXPECT_TRUE(std::isfinite(a.scores.values[i]));
  }
  EXPECT_EQ(a.config, c);
}

TEST(Aggregate, StandardErrorMatchesSampleOracle) {
  const auto w = scaled_model(tiny_config(), 4.0F);
  DiscoveryConfig c;
  c.n_values = {6, 9};
  c.samples_per_n = 12;
  c.correct_only = false;
  const auto rep = aggregate_discovery(w, c, 7);
  const std::size_t heads = rep.scores.values.size();
  std::vector<double> var_of_mean(heads, 0.0);
  for (std::size_t n : c.n_values) {
    std::vector<std::vector<double>> xs(heads);
    for (std::size_t k = 0; k < c.samples_per_n; ++k) {
      const auto dp = delta_pi_sample(w, gen_proxy_sample(n, 20, derive_seed(7, n, k)), c.epsilon, false);
      ASSERT_TRUE(dp);
      for (std::size_t i = 0; i < heads; ++i) xs[i].push_back(dp->values[i]);
    }
    for (std::size_t i = 0; i < heads; ++i) {
      double m = 0.0, v = 0.0;
      for (double x : xs[i]) m += x / 12.0;
      for (double x : xs[i]) v += (x - m) * (x - m) / 11.0;
      var_of_mean[i] += v / 12.0;
    }
  }
  for (std::size_t i = 0; i < heads; ++i) {
    const double expected = std::sqrt(var_of_mean[i]) / 2.0;
    EXPECT_NEAR(rep.standard_error.values[i], expected, 1e-9 * std::max(1.0, expected)) << i;
  }
}

TEST(Aggregate, RejectsWhenEverySampleIsSkipped) {
  const auto w = init_model(tiny_config());
  DiscoveryConfig c;
  c.n_values = {6};
  c.samples_per_n = 3;
  c.epsilon = 1e9;
  try {
    aggregate_discovery(w, c, 1);
    FAIL() << "expected rejection";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("n=6"), std::string::npos);
  }
}

TEST(Aggregate, ValidatesConfig) {
  const auto w = init_model(tiny_config());
  DiscoveryConfig c;
  c.n_values = {};
  EXPECT_THROW(aggregate_discovery(w, c, 0), std::invalid_argument);
  c = DiscoveryConfig{};
  c.samples_per_n = 0;
  EXPECT_THROW(aggregate_discovery(w, c, 0), std::invalid_argument);
  c = DiscoveryConfig{};
  c.n_values = {40};  // 80 positions > max_len 64
  EXPECT_THROW(aggregate_discovery(w, c, 0), std::invalid_argument);
}

TEST(Aggregate, DefaultGrids) {
  EXPECT_EQ(DiscoveryConfig::defaults_for(PositionEncoding::kRotary).n_values, (std::vector<std::size_t>{10, 15, 25, 50}));
  EXPECT_EQ(DiscoveryConfig::defaults_for(PositionEncoding::kLearnable).n_values,
            (std::vector<std::size_t>{10, 15, 25, 50}));
  EXPECT_EQ(DiscoveryConfig::defaults_for(PositionEncoding::kLinearBias).n_values,
            (std::vector<std::size_t>{10, 20, 50, 80}));
  EXPECT_EQ(DiscoveryConfig{}.samples_per_n, 200U);
}

TEST(SelectTopK, AllHeadsSortedAndTiesByIndex) {
  const auto r = hand_report(2, 3, {0.5, -1.0, 0.5, 2.0, 0.0, 0.5});
  const auto all = select_top_k(r, 6);
  const HeadSet expected{{1, 0}, {0, 0}, {0, 2}, {1, 2}, {1, 1}, {0, 1}};
  EXPECT_EQ(all, expected);
  EXPECT_EQ(select_top_k(r, 2), (HeadSet{{1, 0}, {0, 0}}));
}

TEST(SelectTopK, MatchesSortAndSliceOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> d(-5, 5);  // small range forces ties
  std::vector<double> v(24);
  for (double& x : v) x = d(rng) * 0.1;
  const auto r = hand_report(3, 8, v);
  std::vector<std::pair<double, std::size_t>> oracle;
  for (std::size_t i = 0; i < v.size(); ++i) oracle.emplace_back(-v[i], i);
  std::sort(oracle.begin(), oracle.end());
  for (std::ptrdiff_t K = 1; K <= 24; ++K) {
    const auto got = select_top_k(r, K);
    ASSERT_EQ(got.size(), static_cast<std::size_t>(K));
    for (std::ptrdiff_t i = 0; i < K; ++i) {
      const std::size_t idx = oracle[static_cast<std::size_t>(i)].second;
      EXPECT_EQ(got[static_cast<std::size_t>(i)], (HeadId{idx / 8, idx % 8}));
    }
  }
}

TEST(SelectTopK, RejectsBadK) {
  const auto r = hand_report(2, 2, {0, 1, 2, 3});
  EXPECT_THROW(select_top_k(r, 0), std::invalid_argument);
  EXPECT_THROW(select_top_k(r, -3), std::invalid_argument);
  EXPECT_THROW(select_top_k(r, 5), std::invalid_argument);
}
