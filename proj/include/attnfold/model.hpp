#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnfold/tape.hpp"
#include "attnfold/tensor.hpp"

namespace attnfold {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

enum class PositionEncoding { kLearnable, kRotary, kLinearBias };

std::string to_string(PositionEncoding pe);
PositionEncoding parse_position_encoding(const std::string& name);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 8;
  std::size_t d_model = 128;
  std::size_t d_head = 16;
  std::size_t vocab = 256;
  std::size_t max_len = 256;
  PositionEncoding pe = PositionEncoding::kRotary;
  bool use_mlp = true;
  std::size_t d_ff = 512;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadId&) const = default;
};

std::string to_string(const HeadId& id);

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v;
  // Rows [h*d_head, (h+1)*d_head) map head h's value stream into the residual.
  Tensor w_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct TransformerWeights {
  ModelConfig config;
  Tensor tok_embed;  // [V×d_model]
  Tensor pos_embed;  // [max_len×d_model], learnable variant only
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor unembed;  // [d_model×V]

  // Visits every present tensor in a fixed order with a stable name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::size_t tensor_count() const;
  std::size_t parameter_bytes() const;
  bool bitwise_equal(const TransformerWeights& other) const;
};

// Per-layer, per-head residual-stream contributions recorded during forward.
struct HeadCaptures {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<Tensor> contributions;  // index layer*n_heads+head, each [t×d_model]
  std::vector<Tensor> attention_out;  // per layer, [t×d_model]

  const Tensor& at(const HeadId& id) const { return contributions.at(id.layer * n_heads + id.head); }
  const Tensor& at(std::size_t layer, std::size_t head) const { return contributions.at(layer * n_heads + head); }
};

struct InterventionSpec {
  HeadId head;
  std::size_t position = 0;
  std::vector<float> replacement;  // d_model values
};

using TauOverrides = std::map<HeadId, float>;

struct ForwardOptions {
  bool record_captures = false;
  std::span<const InterventionSpec> interventions;
  const TauOverrides* tau = nullptr;
};

struct ForwardResult {
  Tensor logits;  // [t×V]
  std::optional<HeadCaptures> captures;
  std::size_t op_count = 0;
  std::size_t activation_bytes = 0;
};

TransformerWeights init_model(const ModelConfig& config);
// Correctly shaped weights with zero matrices and unit norm gains.
TransformerWeights allocate_model(const ModelConfig& config);

ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options = {});

// Tape-level forward used by training and coefficient learning. When
// trainable is true every weight tensor is registered as a parameter leaf
// (weights must then be mutable); tau_vars inject a learnable multiplier per
// head. Returns the logits node.
struct GraphOptions {
  bool trainable = false;
  std::span<const InterventionSpec> interventions;
  const std::map<HeadId, Var>* tau_vars = nullptr;
  HeadCaptures* captures = nullptr;
};
Var build_forward(Tape& tape, TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options);
Var build_forward(Tape& tape, const TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options);
// Same graph with every weight widened to double; used as a reference.
Var build_forward(TapeD& tape, const TransformerWeights& weights, std::span<const TokenId> tokens,
                  const GraphOptions& options);

// Rotates q and k rows in place; rows correspond to positions.
void apply_rotary(Tensor& q, Tensor& k, std::span<const std::size_t> positions, std::size_t d_head);

// Linear-bias slopes m_h = 2^(-8(h+1)/H).
std::vector<float> alibi_slopes(std::size_t n_heads);
// Per-head [t×t] score bias: -m_h*(i-j) for j <= i, 0 above the diagonal.
std::vector<Tensor> alibi_bias(std::size_t n_heads, std::size_t len);

struct TrainHyper {
  float lr = 5e-4F;
  std::size_t steps = 0;
  std::size_t batch = 8;
  std::size_t warmup = 100;
  std::uint64_t seed = 0;
  float weight_decay = 0.0F;
  // Rate multiplier for the learnable position table.
  float pos_lr_scale = 1.0F;
  // Progress callback every log_every steps (0 disables).
  std::size_t log_every = 0;
  std::function<void(std::size_t step, float loss)> on_log;
};

struct TrainResult {
  std::vector<float> loss_curve;  // mean batch loss per step
};

// Next-token cross-entropy over all positions of randomly drawn corpus
// sequences. Throws std::runtime_error naming the step on divergence.
TrainResult train_base(TransformerWeights& weights, const std::vector<TokenSeq>& corpus, const TrainHyper& hyper);

}  // namespace attnfold
