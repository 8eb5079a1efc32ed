#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnfold/discovery.hpp"
#include "attnfold/model.hpp"
#include "attnfold/proxy_task.hpp"

namespace attnfold {

struct TauTrainConfig {
  std::size_t samples = 500;
  std::size_t n = 50;
  float lr = 0.005F;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float weight_decay = 0.0F;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
  bool operator==(const TauTrainConfig&) const = default;
};

// One multiplier per selected head plus the record of how it was trained.
struct TauSet {
  HeadSet head_set;
  std::map<HeadId, float> entries;
  std::vector<float> loss_curve;  // mean loss per optimizer step
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  // All coefficients at 1.0.
  static TauSet identity(const HeadSet& heads);

  TauOverrides overrides() const { return entries; }
  // Number of coefficients below 1.0; reported, never enforced.
  std::size_t count_below_one() const;
  // Keys must match head_set exactly and every value must be finite.
  void validate() const;
};

// Mean next-token loss over the copy half (positions n-1 .. 2n-2) with tau
// applied to the selected heads.
double proxy_loss(const TransformerWeights& weights, const TauSet& tau, const ProxySample& sample);

struct ProxyLossGrad {
  double loss = 0.0;
  std::map<HeadId, double> grad;
};
// Loss and d(loss)/d(tau). With double_precision every weight is widened
// before evaluation, which is what finite-difference checks need.
ProxyLossGrad proxy_loss_grad(const TransformerWeights& weights, const TauSet& tau, const ProxySample& sample,
                              bool double_precision = false);

// Trains only the coefficients; weights are read-only throughout.
TauSet learn_tau(const TransformerWeights& weights, const HeadSet& heads, const TauTrainConfig& config);

// {"heads":[{"layer":l,"head":h,"tau":v},...],"meta":{...}}
std::string tau_to_json(const TauSet& tau);
TauSet tau_from_json(const std::string& text);

}  // namespace attnfold
