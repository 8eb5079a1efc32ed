#include "attnfold/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <type_traits>
#include <utility>

#include "attnfold/adamw.hpp"

namespace attnfold {

std::string to_string(PositionEncoding pe) {
  switch (pe) {
    case PositionEncoding::kLearnable: return "learnable";
    case PositionEncoding::kRotary: return "rotary";
    case PositionEncoding::kLinearBias: return "linear_bias";
  }
  return "unknown";
}

PositionEncoding parse_position_encoding(const std::string& name) {
  if (name == "learnable") return PositionEncoding::kLearnable;
  if (name == "rotary") return PositionEncoding::kRotary;
  if (name == "linear_bias" || name == "alibi") return PositionEncoding::kLinearBias;
  throw std::invalid_argument("unknown position encoding '" + name + "'");
}

std::string to_string(const HeadId& id) {
  return "L" + std::to_string(id.layer) + "H" + std::to_string(id.head);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (n_heads == 0 || d_head == 0) fail("n_heads and d_head must be positive");
  if (d_model != n_heads * d_head) {
    fail("d_model (" + std::to_string(d_model) + ") != n_heads*d_head (" + std::to_string(n_heads * d_head) + ")");
  }
  if (vocab < 2) fail("vocab must be at least 2");
  if (max_len == 0) fail("max_len must be positive");
  if (pe == PositionEncoding::kRotary && d_head % 2 != 0) fail("rotary variant needs an even d_head");
  if (use_mlp && d_ff == 0) fail("d_ff must be positive when use_mlp");
}

// ---- weights ----------------------------------------------------------------

namespace {

template <typename W, typename F>
void visit_weights(W& w, F&& fn) {
  fn("tok_embed", w.tok_embed);
  if (!w.pos_embed.empty()) fn("pos_embed", w.pos_embed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1_gain", L.ln1_gain);
    fn(p + "ln1_bias", L.ln1_bias);
    fn(p + "w_q", L.w_q);
    fn(p + "w_k", L.w_k);
    fn(p + "w_v", L.w_v);
    fn(p + "w_o", L.w_o);
    if (!L.w_ff1.empty()) {
      fn(p + "ln2_gain", L.ln2_gain);
      fn(p + "ln2_bias", L.ln2_bias);
      fn(p + "w_ff1", L.w_ff1);
      fn(p + "b_ff1", L.b_ff1);
      fn(p + "w_ff2", L.w_ff2);
      fn(p + "b_ff2", L.b_ff2);
    }
  }
  fn("lnf_gain", w.lnf_gain);
  fn("lnf_bias", w.lnf_bias);
  fn("unembed", w.unembed);
}

}  // namespace

void TransformerWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_weights(*this, fn);
}

void TransformerWeights::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_weights(*this, fn);
}

std::size_t TransformerWeights::tensor_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor&) { ++n; });
  return n;
}

std::size_t TransformerWeights::parameter_bytes() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.numel() * sizeof(float); });
  return n;
}

bool TransformerWeights::bitwise_equal(const TransformerWeights& other) const {
  if (!(config == other.config)) return false;
  std::vector<const Tensor*> mine, theirs;
  for_each([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
  other.for_each([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (!mine[i]->bitwise_equal(*theirs[i])) return false;
  }
  return true;
}

TransformerWeights allocate_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  TransformerWeights w;
  w.config = config;
  w.tok_embed = Tensor({config.vocab, d});
  if (config.pe == PositionEncoding::kLearnable) w.pos_embed = Tensor({config.max_len, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights L;
    L.ln1_gain = Tensor({d}, 1.0F);
    L.ln1_bias = Tensor({d});
    L.w_q = Tensor({d, d});
    L.w_k = Tensor({d, d});
    L.w_v = Tensor({d, d});
    L.w_o = Tensor({d, d});
    if (config.use_mlp) {
      L.ln2_gain = Tensor({d}, 1.0F);
      L.ln2_bias = Tensor({d});
      L.w_ff1 = Tensor({d, config.d_ff});
      L.b_ff1 = Tensor({config.d_ff});
      L.w_ff2 = Tensor({config.d_ff, d});
      L.b_ff2 = Tensor({d});
    }
    w.layers.push_back(std::move(L));
  }
  w.lnf_gain = Tensor({d}, 1.0F);
  w.lnf_bias = Tensor({d});
  w.unembed = Tensor({d, config.vocab});
  return w;
}

TransformerWeights init_model(const ModelConfig& config) {
  TransformerWeights w = allocate_model(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0F, 0.02F);
  w.for_each([&](const std::string& name, Tensor& t) {
    if (name.ends_with("gain") || name.ends_with("bias")) return;
    for (float& v : t.data()) v = normal(rng);
  });
  return w;
}

// ---- position encodings -------------------------------------------------------

void apply_rotary(Tensor& q, Tensor& k, std::span<const std::size_t> positions, std::size_t d_head) {
  Tape tape;
  Var rq = rotary(tape, tape.constant_ref(q), d_head, positions);
  Var rk = rotary(tape, tape.constant_ref(k), d_head, positions);
  Tensor q2 = tape.value(rq);
  Tensor k2 = tape.value(rk);
  q = std::move(q2);
  k = std::move(k2);
}

std::vector<float> alibi_slopes(std::size_t n_heads) {
  std::vector<float> slopes(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    slopes[h] = static_cast<float>(std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(n_heads)));
  }
  return slopes;
}

std::vector<Tensor> alibi_bias(std::size_t n_heads, std::size_t len) {
  const auto slopes = alibi_slopes(n_heads);
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor b({len, len});
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j <= i; ++j) b.at(i, j) = -slopes[h] * static_cast<float>(i - j);
    out.push_back(std::move(b));
  }
  return out;
}

// ---- forward ----------------------------------------------------------------

namespace {

void check_interventions(const ModelConfig& cfg, std::size_t len, std::span<const InterventionSpec> ivs) {
  std::set<std::pair<HeadId, std::size_t>> seen;
  for (const auto& iv : ivs) {
    if (iv.head.layer >= cfg.n_layers || iv.head.head >= cfg.n_heads) {
      throw std::out_of_range("intervention targets unknown head " + to_string(iv.head));
    }
    if (iv.position >= len) {
      throw std::out_of_range("intervention position " + std::to_string(iv.position) + " outside sequence of " +
                              std::to_string(len));
    }
    if (iv.replacement.size() != cfg.d_model) {
      throw std::invalid_argument("intervention replacement for " + to_string(iv.head) + " has " +
                                  std::to_string(iv.replacement.size()) + " values, expected d_model");
    }
    for (float v : iv.replacement) {
      if (!std::isfinite(v)) throw std::invalid_argument("intervention replacement for " + to_string(iv.head) + " is not finite");
    }
    if (!seen.emplace(iv.head, iv.position).second) {
      throw std::invalid_argument("duplicate intervention on " + to_string(iv.head) + " at position " +
                                  std::to_string(iv.position));
    }
  }
}

template <typename T, typename Weights, typename Leaf>
Var build_forward_impl(BasicTape<T>& tape, Weights& w, std::span<const TokenId> tokens, const GraphOptions& opt, Leaf leaf) {
  const ModelConfig& cfg = w.config;
  const std::size_t len = tokens.size();
  if (len == 0) throw std::invalid_argument("forward: empty token sequence");
  if (len > cfg.max_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(len) + " exceeds max_len " +
                                std::to_string(cfg.max_len));
  }
  check_interventions(cfg, len, opt.interventions);
  if (opt.tau_vars) {
    for (const auto& [id, v] : *opt.tau_vars) {
      if (id.layer >= cfg.n_layers || id.head >= cfg.n_heads) {
        throw std::out_of_range("tau override targets unknown head " + to_string(id));
      }
    }
  }
  if (opt.captures) {
    opt.captures->n_layers = cfg.n_layers;
    opt.captures->n_heads = cfg.n_heads;
    opt.captures->contributions.assign(cfg.n_layers * cfg.n_heads, Tensor());
    opt.captures->attention_out.assign(cfg.n_layers, Tensor());
  }

  const std::size_t dh = cfg.d_head;
  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  std::vector<T> slopes;
  if (cfg.pe == PositionEncoding::kLinearBias) {
    for (float m : alibi_slopes(cfg.n_heads)) slopes.push_back(m);
  }
  auto as_float = [](const BasicTensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
      return t;
    } else {
      return t.template cast<float>();
    }
  };

  Var x = embedding(tape, leaf(w.tok_embed), tokens);
  if (cfg.pe == PositionEncoding::kLearnable) x = add(tape, x, slice_rows(tape, leaf(w.pos_embed), 0, len));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = w.layers[l];
    Var h = layer_norm(tape, x, leaf(L.ln1_gain), leaf(L.ln1_bias));
    Var q = matmul(tape, h, leaf(L.w_q));
    Var k = matmul(tape, h, leaf(L.w_k));
    Var v = matmul(tape, h, leaf(L.w_v));
    if (cfg.pe == PositionEncoding::kRotary) {
      q = rotary(tape, q, dh, positions);
      k = rotary(tape, k, dh, positions);
    }
    Var z = causal_attention(tape, q, k, v, cfg.n_heads, slopes);
    Var w_o = leaf(L.w_o);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const HeadId id{l, hd};
      Var a = matmul(tape, slice_cols(tape, z, hd * dh, (hd + 1) * dh), slice_rows(tape, w_o, hd * dh, (hd + 1) * dh));
      if (opt.tau_vars) {
        if (auto it = opt.tau_vars->find(id); it != opt.tau_vars->end()) a = scale_by(tape, a, it->second);
      }
      for (const auto& iv : opt.interventions) {
        if (iv.head != id) continue;
        const std::vector<T> rep(iv.replacement.begin(), iv.replacement.end());
        a = replace_row(tape, a, iv.position, std::span<const T>(rep));
      }
      if (opt.captures) opt.captures->contributions[l * cfg.n_heads + hd] = as_float(tape.value(a));
      heads.push_back(a);
    }
    Var attn = add_n(tape, heads);
    if (opt.captures) opt.captures->attention_out[l] = as_float(tape.value(attn));
    x = add(tape, x, attn);
    if (cfg.use_mlp) {
      Var m = layer_norm(tape, x, leaf(L.ln2_gain), leaf(L.ln2_bias));
      m = gelu(tape, add_bias(tape, matmul(tape, m, leaf(L.w_ff1)), leaf(L.b_ff1)));
      m = add_bias(tape, matmul(tape, m, leaf(L.w_ff2)), leaf(L.b_ff2));
      x = add(tape, x, m);
    }
  }
  Var f = layer_norm(tape, x, leaf(w.lnf_gain), leaf(w.lnf_bias));
  return matmul(tape, f, leaf(w.unembed));
}

}  // namespace

Var build_forward(Tape& tape, TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options) {
  if (!options.trainable) return build_forward(tape, std::as_const(weights), tokens, options);
  return build_forward_impl(tape, weights, tokens, options, [&](Tensor& t) { return tape.param(t); });
}

Var build_forward(Tape& tape, const TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options) {
  if (options.trainable) throw std::logic_error("build_forward: trainable graph needs mutable weights");
  return build_forward_impl(tape, weights, tokens, options, [&](const Tensor& t) { return tape.constant_ref(t); });
}

Var build_forward(TapeD& tape, const TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options) {
  if (options.trainable) throw std::logic_error("build_forward: double-precision graphs are evaluation only");
  return build_forward_impl(tape, weights, tokens, options,
                            [&](const Tensor& t) { return tape.constant(t.cast<double>()); });
}

ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options) {
  Tape tape;
  std::map<HeadId, Var> tau_vars;
  GraphOptions g;
  g.interventions = options.interventions;
  if (options.tau) {
    for (const auto& [id, value] : *options.tau) {
      if (!std::isfinite(value)) throw std::invalid_argument("tau override for " + to_string(id) + " is not finite");
      tau_vars.emplace(id, tape.constant(Tensor::scalar(value)));
    }
    g.tau_vars = &tau_vars;
  }
  ForwardResult result;
  if (options.record_captures) {
    result.captures.emplace();
    g.captures = &*result.captures;
  }
  Var logits = build_forward(tape, weights, tokens, g);
  if (!tape.value(logits).all_finite()) throw std::domain_error("forward: non-finite logits");
  result.op_count = tape.op_count();
  result.activation_bytes = tape.value_bytes();
  result.logits = tape.value(logits);
  return result;
}

// ---- training ---------------------------------------------------------------

TrainResult train_base(TransformerWeights& weights, const std::vector<TokenSeq>& corpus, const TrainHyper& hyper) {
  TrainResult result;
  if (hyper.steps == 0) return result;
  if (corpus.empty()) throw std::invalid_argument("train_base: empty corpus");
  if (hyper.batch == 0) throw std::invalid_argument("train_base: batch must be positive");
  for (const auto& s : corpus) {
    if (s.size() < 2) throw std::invalid_argument("train_base: corpus sequence shorter than 2 tokens");
    if (s.size() > weights.config.max_len) {
      throw std::invalid_argument("train_base: corpus sequence of " + std::to_string(s.size()) +
                                  " tokens exceeds max_len");
    }
  }

  std::vector<NamedParam> params;
  weights.for_each([&](const std::string& name, Tensor& t) {
    params.push_back({name, &t, name == "pos_embed" ? hyper.pos_lr_scale : 1.0F});
  });
  AdamW opt({hyper.lr, 0.9F, 0.999F, hyper.weight_decay, 1e-8F});
  std::mt19937_64 rng(hyper.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  constexpr double kClipNorm = 1.0;
  const float inv_batch = 1.0F / static_cast<float>(hyper.batch);

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    for (auto& p : params) p.tensor->zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < hyper.batch; ++b) {
      const TokenSeq& seq = corpus[pick(rng)];
      Tape tape;
      std::span<const TokenId> input(seq.data(), seq.size() - 1);
      std::span<const TokenId> targets(seq.data() + 1, seq.size() - 1);
      Var loss;
      GraphOptions g;
      g.trainable = true;
      try {
        Var logits = build_forward(tape, weights, input, g);
        loss = cross_entropy(tape, logits, targets, std::vector<bool>(input.size(), true));
      } catch (const std::domain_error&) {
        throw std::runtime_error("train_base: loss diverged at step " + std::to_string(step));
      }
      const float lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) throw std::runtime_error("train_base: loss diverged at step " + std::to_string(step));
      batch_loss += lv;
      backward(tape, scale(tape, loss, inv_batch));
    }
    result.loss_curve.push_back(static_cast<float>(batch_loss / static_cast<double>(hyper.batch)));

    double norm2 = 0.0;
    for (auto& p : params) {
      for (float g : std::as_const(*p.tensor).grad()) norm2 += static_cast<double>(g) * g;
    }
    if (!std::isfinite(norm2)) throw std::runtime_error("train_base: gradient diverged at step " + std::to_string(step));
    const double norm = std::sqrt(norm2);
    if (norm > kClipNorm) {
      const auto f = static_cast<float>(kClipNorm / norm);
      for (auto& p : params)
        for (float& g : p.tensor->grad()) g *= f;
    }

    // Linear warmup, constant plateau, then cosine decay over the last fifth to a tenth of the peak.
    double lr = hyper.lr;
    const std::size_t decay_start = hyper.steps - hyper.steps / 5;
    if (step < hyper.warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(hyper.warmup);
    } else if (step >= decay_start) {
      const double span = static_cast<double>(std::max<std::size_t>(1, hyper.steps - decay_start));
      const double progress = static_cast<double>(step - decay_start) / span;
      lr *= 0.1 + 0.45 * (1.0 + std::cos(3.14159265358979323846 * progress));
    }
    opt.set_lr(static_cast<float>(lr));
    opt.step(params);
    if (hyper.log_every && hyper.on_log && (step % hyper.log_every == 0 || step + 1 == hyper.steps)) {
      hyper.on_log(step, result.loss_curve.back());
    }
  }
  for (auto& p : params) p.tensor->clear_grad();
  return result;
}

}  // namespace attnfold
