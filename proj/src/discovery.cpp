#include "attnfold/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace attnfold {

DiscoveryConfig DiscoveryConfig::defaults_for(PositionEncoding pe) {
  DiscoveryConfig c;
  if (pe == PositionEncoding::kLinearBias) c.n_values = {10, 20, 50, 80};
  return c;
}

void DiscoveryConfig::validate(const ModelConfig& model) const {
  if (n_values.empty()) throw std::invalid_argument("discovery: n_values is empty");
  if (samples_per_n == 0) throw std::invalid_argument("discovery: samples_per_n must be at least 1");
  if (K == 0 || K > model.n_layers * model.n_heads) {
    throw std::invalid_argument("discovery: K=" + std::to_string(K) + " outside [1, L*H]");
  }
  for (std::size_t n : n_values) {
    if (n < 2 || 2 * n > model.max_len) {
      throw std::invalid_argument("discovery: n=" + std::to_string(n) + " does not fit max_len");
    }
  }
  if (!(epsilon >= 0.0)) throw std::invalid_argument("discovery: epsilon must be non-negative");
}

std::vector<std::vector<float>> head_means(const HeadCaptures& captures) {
  std::vector<std::vector<float>> means;
  means.reserve(captures.contributions.size());
  for (const Tensor& c : captures.contributions) {
    const std::size_t t = c.rows(), d = c.cols();
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) acc[j] += c.at(i, j);
    std::vector<float> m(d);
    for (std::size_t j = 0; j < d; ++j) m[j] = static_cast<float>(acc[j] / static_cast<double>(t));
    means.push_back(std::move(m));
  }
  return means;
}

std::optional<HeadMatrix> delta_pi_sample(const TransformerWeights& weights, const ProxySample& sample,
                                          double epsilon, bool correct_only) {
  const ModelConfig& cfg = weights.config;
  validate_proxy_sample(sample, cfg.vocab);
  const std::size_t pos = sample.final_position();
  const TokenId target = sample.target();

  ForwardOptions base_opt;
  base_opt.record_captures = true;
  const ForwardResult base = forward(weights, sample.tokens, base_opt);
  const auto row = base.logits.row(pos);
  const double pi = row[target];
  if (correct_only && static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin()) != target) {
    return std::nullopt;
  }
  if (std::abs(pi) < epsilon) return std::nullopt;

  const auto means = head_means(*base.captures);
  HeadMatrix out(cfg.n_layers, cfg.n_heads);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      std::vector<InterventionSpec> iv{{{l, h}, pos, means[l * cfg.n_heads + h]}};
      ForwardOptions opt;
      opt.interventions = iv;
      double pi_tilde = 0.0;
      try {
        pi_tilde = forward(weights, sample.tokens, opt).logits.at(pos, target);
      } catch (const std::domain_error&) {
        throw std::domain_error("delta_pi: non-finite logits after ablating " + to_string({l, h}));
      }
      out.at(l, h) = pi_tilde / pi - 1.0;
    }
  }
  return out;
}

DeltaPiReport aggregate_discovery(const TransformerWeights& weights, const DiscoveryConfig& config,
                                  std::uint64_t seed) {
  const ModelConfig& m = weights.config;
  config.validate(m);
  DeltaPiReport report;
  report.config = config;
  report.seed = seed;
  report.scores = HeadMatrix(m.n_layers, m.n_heads);
  report.standard_error = HeadMatrix(m.n_layers, m.n_heads);
  std::vector<double> var_of_mean(m.n_layers * m.n_heads, 0.0);

  for (std::size_t ni = 0; ni < config.n_values.size(); ++ni) {
    const std::size_t n = config.n_values[ni];
    HeadMatrix sum(m.n_layers, m.n_heads), sq(m.n_layers, m.n_heads);
    std::size_t used = 0;
    for (std::size_t k = 0; k < config.samples_per_n; ++k) {
      const ProxySample s = gen_proxy_sample(n, m.vocab, derive_seed(seed, n, k));
      const auto dp = delta_pi_sample(weights, s, config.epsilon, config.correct_only);
      if (!dp) {
        ++report.skipped;
        continue;
      }
      ++used;
      for (std::size_t i = 0; i < dp->values.size(); ++i) {
        sum.values[i] += dp->values[i];
        sq.values[i] += dp->values[i] * dp->values[i];
      }
    }
    if (used == 0) {
      throw std::runtime_error("discovery: all " + std::to_string(config.samples_per_n) +
                               " samples skipped at n=" + std::to_string(n) +
                               " (model fails the copy task or baseline logits are below epsilon)");
    }
    HeadMatrix mean(m.n_layers, m.n_heads);
    const double u = static_cast<double>(used);
    for (std::size_t i = 0; i < mean.values.size(); ++i) {
      mean.values[i] = sum.values[i] / u;
      if (used > 1) {
        const double var = std::max(0.0, (sq.values[i] - u * mean.values[i] * mean.values[i]) / (u - 1.0));
        var_of_mean[i] += var / u;
      }
      report.scores.values[i] += mean.values[i];
    }
    report.per_n_scores.push_back(std::move(mean));
    report.used_per_n.push_back(used);
  }
  const double count = static_cast<double>(config.n_values.size());
  for (std::size_t i = 0; i < report.scores.values.size(); ++i) {
    report.scores.values[i] /= count;
    report.standard_error.values[i] = std::sqrt(var_of_mean[i]) / count;
    if (!std::isfinite(report.scores.values[i])) throw std::domain_error("discovery: non-finite aggregated score");
  }
  return report;
}

HeadSet select_top_k(const DeltaPiReport& report, std::ptrdiff_t K) {
  const HeadMatrix& s = report.scores;
  const std::size_t total = s.n_layers * s.n_heads;
  if (K <= 0) throw std::invalid_argument("select_top_k: K must be positive");
  if (static_cast<std::size_t>(K) > total) {
    throw std::invalid_argument("select_top_k: K=" + std::to_string(K) + " exceeds " + std::to_string(total) +
                                " heads");
  }
  HeadSet all;
  for (std::size_t l = 0; l < s.n_layers; ++l)
    for (std::size_t h = 0; h < s.n_heads; ++h) all.push_back({l, h});
  std::stable_sort(all.begin(), all.end(),
                   [&](const HeadId& a, const HeadId& b) { return s.at(a.layer, a.head) > s.at(b.layer, b.head); });
  all.resize(static_cast<std::size_t>(K));
  return all;
}

}  // namespace attnfold
