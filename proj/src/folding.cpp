#include "attnfold/folding.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace attnfold {

namespace {

TensorD reference_logits(const TransformerWeights& w, const TokenSeq& seq, const TauOverrides& tau) {
  TapeD tape;
  std::map<HeadId, TensorD> values;
  for (const auto& [id, v] : tau) values.emplace(id, TensorD::scalar(v));
  std::map<HeadId, Var> vars;
  for (const auto& [id, v] : values) vars.emplace(id, tape.constant_ref(v));
  GraphOptions o;
  if (!vars.empty()) o.tau_vars = &vars;
  return tape.value(build_forward(tape, w, seq, o));
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TransformerWeights fold_tau(const TransformerWeights& weights, const TauSet& tau) {
  const ModelConfig& c = weights.config;
  for (const auto& [id, v] : tau.entries) {
    if (id.layer >= c.n_layers || id.head >= c.n_heads) throw std::out_of_range("fold_tau: unknown head " + to_string(id));
    if (!std::isfinite(v)) throw std::invalid_argument("fold_tau: coefficient for " + to_string(id) + " is not finite");
  }
  TransformerWeights out = weights;
  for (const auto& [id, v] : tau.entries) {
    Tensor& w_o = out.layers[id.layer].w_o;
    for (std::size_t r = id.head * c.d_head; r < (id.head + 1) * c.d_head; ++r) {
      for (float& x : w_o.row(r)) x *= v;
    }
  }
  return out;
}

FoldReport verify_fold(const TransformerWeights& original, const TransformerWeights& folded, const TauSet& tau,
                       const std::vector<TokenSeq>& suite, double tol) {
  if (suite.empty()) throw std::invalid_argument("verify_fold: empty verification suite");
  if (!(original.config == folded.config) || original.tensor_count() != folded.tensor_count()) {
    throw std::invalid_argument("verify_fold: folded model architecture differs from the original");
  }
  FoldReport r;
  r.tolerance = tol;
  r.applied = tau.entries;
  const TauOverrides overrides = tau.overrides();
  ForwardOptions with_tau;
  with_tau.tau = &overrides;
  for (const auto& seq : suite) {
    // Both sides run through the double-precision graph, so the difference
    // measures the fold itself rather than FP32 forward-pass rounding.
    r.max_abs_logit_diff = std::max(r.max_abs_logit_diff, max_abs_diff(reference_logits(folded, seq, {}),
                                                                       reference_logits(original, seq, overrides)));
    const Tensor a = forward(folded, seq).logits;
    const Tensor b = forward(original, seq, with_tau).logits;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      r.fp32_max_abs_logit_diff = std::max(r.fp32_max_abs_logit_diff, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    ++r.sequences;
  }
  r.passed = r.max_abs_logit_diff <= tol;
  return r;
}

}  // namespace attnfold
