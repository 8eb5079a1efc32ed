#include "attnfold/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "attnfold/folding.hpp"

namespace attnfold {

std::optional<double> EvalReport::find(const std::string& metric, std::size_t n, std::size_t gold_slot,
                                       std::size_t K) const {
  for (const auto& r : rows) {
    if (r.metric != metric || r.K != K) continue;
    if (n && r.n != n) continue;
    if (gold_slot && r.gold_slot != gold_slot) continue;
    return r.value;
  }
  return std::nullopt;
}

double EvalReport::mean(const std::string& metric, std::size_t K) const {
  double s = 0.0;
  std::size_t c = 0;
  for (const auto& r : rows) {
    if (r.metric == metric && r.K == K) {
      s += r.value;
      ++c;
    }
  }
  if (c == 0) throw std::invalid_argument("eval report has no rows for metric " + metric);
  return s / static_cast<double>(c);
}

std::string EvalReport::to_csv() const {
  std::ostringstream o;
  o.precision(9);
  o << "model,pe,metric,n,gold_slot,K,samples,value\n";
  for (const auto& r : rows) {
    o << r.model << ',' << r.pe << ',' << r.metric << ',' << r.n << ',' << r.gold_slot << ',' << r.K << ','
      << r.samples << ',' << r.value << '\n';
  }
  return o.str();
}

namespace {

ForwardOptions with_tau(const TauOverrides* tau) {
  ForwardOptions o;
  o.tau = tau;
  return o;
}

EvalRow make_row(const TransformerWeights& w, const EvalTag& tag, const std::string& metric) {
  EvalRow r;
  r.model = tag.model;
  r.pe = to_string(w.config.pe);
  r.metric = metric;
  r.K = tag.K;
  return r;
}

}  // namespace

EvalReport eval_copy(const TransformerWeights& weights, const TauOverrides* tau, const std::vector<std::size_t>& n_values,
                     std::size_t samples, std::uint64_t seed, const EvalTag& tag) {
  if (samples == 0) throw std::invalid_argument("eval_copy: samples must be positive");
  for (std::size_t n : n_values) {
    if (2 * n > weights.config.max_len) {
      throw std::invalid_argument("eval_copy: n=" + std::to_string(n) + " needs " + std::to_string(2 * n) +
                                  " positions, max_len is " + std::to_string(weights.config.max_len));
    }
  }
  EvalReport rep;
  const auto opt = with_tau(tau);
  for (std::size_t n : n_values) {
    double acc = 0.0;
    for (std::size_t k = 0; k < samples; ++k) {
      const ProxySample s = gen_proxy_sample(n, weights.config.vocab, derive_seed(seed, n, k));
      acc += copy_accuracy(forward(weights, s.tokens, opt).logits, s);
    }
    EvalRow r = make_row(weights, tag, "copy_accuracy");
    r.n = n;
    r.samples = samples;
    r.value = acc / static_cast<double>(samples);
    rep.rows.push_back(r);
  }
  return rep;
}

KVLayout KVLayout::for_vocab(std::size_t vocab) {
  if (vocab < 8) throw std::invalid_argument("kv: vocabulary too small for delimiters");
  KVLayout l;
  l.pair_sep = static_cast<TokenId>(vocab - 2);
  l.query_sep = static_cast<TokenId>(vocab - 1);
  l.content_vocab = vocab - 2;
  return l;
}

KVSample gen_kv_sample(std::size_t pairs, std::size_t gold_slot, std::size_t vocab, std::uint64_t seed) {
  const KVLayout lay = KVLayout::for_vocab(vocab);
  if (pairs == 0) throw std::invalid_argument("kv: at least one pair is required");
  if (gold_slot < 1 || gold_slot > pairs) {
    throw std::invalid_argument("kv: gold slot " + std::to_string(gold_slot) + " outside 1.." + std::to_string(pairs));
  }
  if (2 * pairs > lay.content_vocab) throw std::invalid_argument("kv: too many pairs for distinct tokens");
  std::mt19937_64 rng(seed);
  std::vector<TokenId> pool(lay.content_vocab);
  std::iota(pool.begin(), pool.end(), TokenId{0});
  // Partial Fisher-Yates: the first 2P entries are distinct uniform draws.
  for (std::size_t i = 0; i < 2 * pairs; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  KVSample s;
  s.gold_slot = gold_slot;
  for (std::size_t p = 0; p < pairs; ++p) {
    s.tokens.insert(s.tokens.end(), {pool[2 * p], pool[2 * p + 1], lay.pair_sep});
  }
  const TokenId gold_key = pool[2 * (gold_slot - 1)];
  s.target = pool[2 * (gold_slot - 1) + 1];
  s.tokens.insert(s.tokens.end(), {lay.query_sep, gold_key});
  return s;
}

double kv_hit(const Tensor& logits, const KVSample& sample) {
  if (logits.rows() != sample.tokens.size()) throw std::invalid_argument("kv_hit: logits length mismatch");
  const auto row = logits.row(sample.answer_position());
  return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin()) == sample.target ? 1.0 : 0.0;
}

EvalReport eval_kv(const TransformerWeights& weights, const TauOverrides* tau, std::size_t pairs,
                   const std::vector<std::size_t>& gold_slots, std::size_t samples, std::uint64_t seed,
                   const EvalTag& tag) {
  const std::size_t len = KVLayout::encoded_length(pairs);
  if (len > weights.config.max_len) {
    throw std::invalid_argument("eval_kv: " + std::to_string(pairs) + " pairs encode to " + std::to_string(len) +
                                " tokens, max_len is " + std::to_string(weights.config.max_len));
  }
  if (samples == 0) throw std::invalid_argument("eval_kv: samples must be positive");
  EvalReport rep;
  const auto opt = with_tau(tau);
  for (std::size_t slot : gold_slots) {
    double hits = 0.0;
    for (std::size_t k = 0; k < samples; ++k) {
      // Samples are shared across slots apart from the gold position.
      const KVSample s = gen_kv_sample(pairs, slot, weights.config.vocab, derive_seed(seed, pairs, k));
      hits += kv_hit(forward(weights, s.tokens, opt).logits, s);
    }
    EvalRow r = make_row(weights, tag, "kv_accuracy");
    r.gold_slot = slot;
    r.n = pairs;
    r.samples = samples;
    r.value = hits / static_cast<double>(samples);
    rep.rows.push_back(r);
  }
  return rep;
}

std::vector<TokenSeq> markov_heldout(const CorpusConfig& corpus, std::size_t vocab, std::size_t count,
                                     std::size_t len, std::uint64_t seed) {
  const MarkovTable table(vocab, corpus.markov_seed);
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(table.rollout(len, derive_seed(seed, 0x4b4e4f57, k)));
  return out;
}

double eval_knowledge(const TransformerWeights& weights, const TauOverrides* tau, const std::vector<TokenSeq>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("eval_knowledge: empty corpus");
  std::map<HeadId, Var> vars;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw std::invalid_argument("eval_knowledge: sequence shorter than 2 tokens");
    Tape tape;
    vars.clear();
    GraphOptions g;
    if (tau) {
      for (const auto& [id, v] : *tau) vars.emplace(id, tape.constant(Tensor::scalar(v)));
      g.tau_vars = &vars;
    }
    std::span<const TokenId> input(seq.data(), seq.size() - 1);
    std::span<const TokenId> targets(seq.data() + 1, seq.size() - 1);
    Var logits = build_forward(tape, weights, input, g);
    Var loss = cross_entropy(tape, logits, targets, std::vector<bool>(input.size(), true));
    total += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(input.size());
    count += input.size();
  }
  return total / static_cast<double>(count);
}

EvalReport evaluate(const TransformerWeights& weights, const TauOverrides* tau, const EvalConfig& config,
                    const CorpusConfig& corpus, const EvalTag& tag) {
  EvalReport rep = eval_copy(weights, tau, config.copy_n, config.copy_samples, config.seed, tag);
  rep.append(eval_kv(weights, tau, config.kv_pairs, config.gold_slots, config.kv_samples, config.seed, tag));
  if (config.knowledge_sequences > 0) {
    const auto held = markov_heldout(corpus, weights.config.vocab, config.knowledge_sequences, config.knowledge_len,
                                     config.seed);
    EvalRow r = make_row(weights, tag, "markov_loss");
    r.samples = held.size();
    r.value = eval_knowledge(weights, tau, held);
    rep.rows.push_back(r);
  }
  return rep;
}

SweepResult sweep_k(const TransformerWeights& weights, const DeltaPiReport& report, const std::vector<std::size_t>& k_values,
                    const TauTrainConfig& tau_config, const EvalConfig& eval_config, const CorpusConfig& corpus) {
  const std::size_t total = weights.config.n_layers * weights.config.n_heads;
  for (std::size_t k : k_values) {
    if (k == 0 || k > total) throw std::invalid_argument("sweep_k: K=" + std::to_string(k) + " outside [1, L*H]");
  }
  SweepResult out;
  out.report = evaluate(weights, nullptr, eval_config, corpus, {"baseline", 0});
  for (std::size_t k : k_values) {
    SweepRow row;
    row.K = k;
    row.heads = select_top_k(report, static_cast<std::ptrdiff_t>(k));
    row.tau = learn_tau(weights, row.heads, tau_config);
    const TransformerWeights folded = fold_tau(weights, row.tau);
    out.report.append(evaluate(folded, nullptr, eval_config, corpus, {"folded", k}));
    out.runs.push_back(std::move(row));
  }
  return out;
}

std::string BenchReport::to_csv() const {
  std::ostringstream o;
  o.precision(9);
  o << "model,repetitions,seq_len,tokens_per_sec_mean,tokens_per_sec_sd,param_bytes,activation_bytes,op_count\n";
  o << "baseline," << repetitions << ',' << seq_len << ',' << baseline_tps_mean << ',' << baseline_tps_sd << ','
    << baseline_param_bytes << ',' << baseline_activation_bytes << ',' << baseline_op_count << '\n';
  o << "folded," << repetitions << ',' << seq_len << ',' << folded_tps_mean << ',' << folded_tps_sd << ','
    << folded_param_bytes << ',' << folded_activation_bytes << ',' << folded_op_count << '\n';
  return o.str();
}

BenchReport bench(const TransformerWeights& baseline, const TransformerWeights& folded, std::size_t seq_len,
                  std::size_t repetitions, std::uint64_t seed) {
  if (repetitions < 5) throw std::invalid_argument("bench: at least 5 repetitions are required");
  if (seq_len == 0 || seq_len > baseline.config.max_len || seq_len > folded.config.max_len) {
    throw std::invalid_argument("bench: seq_len must be in [1, max_len]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(std::min(baseline.config.vocab, folded.config.vocab) - 1));
  TokenSeq input(seq_len);
  for (auto& t : input) t = tok(rng);

  using clock = std::chrono::steady_clock;
  BenchReport r;
  r.repetitions = repetitions;
  r.seq_len = seq_len;
  r.baseline_param_bytes = baseline.parameter_bytes();
  r.folded_param_bytes = folded.parameter_bytes();

  // Warm up both models and size each timed block to roughly 50 ms.
  const ForwardResult wa = forward(baseline, input);
  const ForwardResult wb = forward(folded, input);
  r.baseline_activation_bytes = wa.activation_bytes;
  r.folded_activation_bytes = wb.activation_bytes;
  r.baseline_op_count = wa.op_count;
  r.folded_op_count = wb.op_count;
  const auto c0 = clock::now();
  forward(baseline, input);
  const double one = std::chrono::duration<double>(clock::now() - c0).count();
  const std::size_t inner = std::max<std::size_t>(1, static_cast<std::size_t>(0.05 / std::max(one, 1e-6)));

  auto timed = [&](const TransformerWeights& w) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) forward(w, input);
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    return static_cast<double>(inner * seq_len) / s;
  };
  std::vector<double> a, b;
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    if (rep % 2 == 0) {
      a.push_back(timed(baseline));
      b.push_back(timed(folded));
    } else {
      b.push_back(timed(folded));
      a.push_back(timed(baseline));
    }
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  stats(a, r.baseline_tps_mean, r.baseline_tps_sd);
  stats(b, r.folded_tps_mean, r.folded_tps_sd);
  r.ratio = r.folded_tps_mean / r.baseline_tps_mean;
  return r;
}

}  // namespace attnfold
