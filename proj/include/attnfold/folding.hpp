#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "attnfold/model.hpp"
#include "attnfold/tau.hpp"

namespace attnfold {

struct FoldReport {
  // Measured with both models widened to double; the FP32 figure is informational.
  double max_abs_logit_diff = 0.0;
  double fp32_max_abs_logit_diff = 0.0;
  std::size_t sequences = 0;
  double tolerance = 1e-5;
  bool passed = false;
  std::map<HeadId, float> applied;
};

// Copy of weights with each selected head's W_O row block scaled by its tau.
TransformerWeights fold_tau(const TransformerWeights& weights, const TauSet& tau);

// Compares the folded model (no overrides) against the original run with
// runtime tau overrides on every suite sequence.
FoldReport verify_fold(const TransformerWeights& original, const TransformerWeights& folded, const TauSet& tau,
                       const std::vector<TokenSeq>& suite, double tol = 1e-5);

}  // namespace attnfold
