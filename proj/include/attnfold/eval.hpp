#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnfold/discovery.hpp"
#include "attnfold/model.hpp"
#include "attnfold/proxy_task.hpp"
#include "attnfold/tau.hpp"

namespace attnfold {

// One measured condition. Fields that do not apply to a metric stay zero.
struct EvalRow {
  std::string model;   // free-form tag, e.g. "baseline" or "folded"
  std::string pe;      // position-encoding family
  std::string metric;  // copy_accuracy, kv_accuracy, markov_loss
  std::size_t n = 0;
  std::size_t gold_slot = 0;
  std::size_t K = 0;
  std::size_t samples = 0;
  double value = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  void append(const EvalReport& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
  // Value of the first row matching metric and, when non-zero, n/slot/K.
  std::optional<double> find(const std::string& metric, std::size_t n = 0, std::size_t gold_slot = 0,
                             std::size_t K = 0) const;
  // Unweighted mean over rows of a metric for the given K.
  double mean(const std::string& metric, std::size_t K = 0) const;
  std::string to_csv() const;
};

struct EvalTag {
  std::string model = "baseline";
  std::size_t K = 0;
};

EvalReport eval_copy(const TransformerWeights& weights, const TauOverrides* tau, const std::vector<std::size_t>& n_values,
                     std::size_t samples, std::uint64_t seed, const EvalTag& tag = {});

// Key-value retrieval. Layout, with the two delimiters taken from the top
// of the vocabulary:  (key value pair)×P  query gold_key  -> value
struct KVLayout {
  TokenId pair_sep = 0;
  TokenId query_sep = 0;
  std::size_t content_vocab = 0;  // keys and values are drawn from [0, content_vocab)

  static KVLayout for_vocab(std::size_t vocab);
  static std::size_t encoded_length(std::size_t pairs) { return 3 * pairs + 2; }
};

struct KVSample {
  TokenSeq tokens;
  std::size_t gold_slot = 0;  // 1-based
  TokenId target = 0;
  std::size_t answer_position() const { return tokens.size() - 1; }
};

// All 2P key and value tokens are distinct. gold_slot is 1-based.
KVSample gen_kv_sample(std::size_t pairs, std::size_t gold_slot, std::size_t vocab, std::uint64_t seed);

double kv_hit(const Tensor& logits, const KVSample& sample);

EvalReport eval_kv(const TransformerWeights& weights, const TauOverrides* tau, std::size_t pairs,
                   const std::vector<std::size_t>& gold_slots, std::size_t samples, std::uint64_t seed,
                   const EvalTag& tag = {});

// Markov rollouts from the same table that fed base training.
std::vector<TokenSeq> markov_heldout(const CorpusConfig& corpus, std::size_t vocab, std::size_t count,
                                     std::size_t len, std::uint64_t seed);

// Mean next-token loss over every position of every sequence.
double eval_knowledge(const TransformerWeights& weights, const TauOverrides* tau, const std::vector<TokenSeq>& corpus);

struct EvalConfig {
  std::vector<std::size_t> copy_n{10, 25, 50};
  std::size_t copy_samples = 200;
  std::size_t kv_pairs = 10;
  std::vector<std::size_t> gold_slots{1, 3, 5, 7, 10};
  std::size_t kv_samples = 200;
  std::size_t knowledge_sequences = 100;
  std::size_t knowledge_len = 100;
  std::uint64_t seed = 4242;
  bool operator==(const EvalConfig&) const = default;
};

// Copy, KV and knowledge rows for one model.
EvalReport evaluate(const TransformerWeights& weights, const TauOverrides* tau, const EvalConfig& config,
                    const CorpusConfig& corpus, const EvalTag& tag);

// For each K: top-K heads, learned coefficients, folded model, evaluation.
// Every row depends only on its own K and the shared seeds.
struct SweepRow {
  std::size_t K = 0;
  HeadSet heads;
  TauSet tau;
};
struct SweepResult {
  EvalReport report;
  std::vector<SweepRow> runs;
};
SweepResult sweep_k(const TransformerWeights& weights, const DeltaPiReport& report, const std::vector<std::size_t>& k_values,
                    const TauTrainConfig& tau_config, const EvalConfig& eval_config, const CorpusConfig& corpus);

struct BenchReport {
  std::size_t repetitions = 0;
  std::size_t seq_len = 0;
  double baseline_tps_mean = 0.0, baseline_tps_sd = 0.0;
  double folded_tps_mean = 0.0, folded_tps_sd = 0.0;
  double ratio = 0.0;  // folded / baseline tokens per second
  std::size_t baseline_param_bytes = 0, folded_param_bytes = 0;
  std::size_t baseline_activation_bytes = 0, folded_activation_bytes = 0;
  std::size_t baseline_op_count = 0, folded_op_count = 0;

  std::string to_csv() const;
};

// Interleaved A/B timing of plain forwards on identical inputs.
BenchReport bench(const TransformerWeights& baseline, const TransformerWeights& folded, std::size_t seq_len,
                  std::size_t repetitions, std::uint64_t seed);

}  // namespace attnfold
