#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnfold/tensor.hpp"

namespace attnfold {

struct AdamWConfig {
  float lr = 0.005F;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float weight_decay = 0.0F;
  float eps = 1e-8F;
};

struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
  float lr_scale = 1.0F;  // multiplies the optimizer rate for this parameter
};

// Decoupled-weight-decay Adam. Moment buffers are allocated lazily on the
// first step and matched to parameters by position.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // Applies one update from each parameter's grad(). Throws naming the first
  // parameter whose gradient is non-finite; no parameter is modified then.
  void step(const std::vector<NamedParam>& params);

  void set_lr(float lr) { config_.lr = lr; }
  const AdamWConfig& config() const { return config_; }
  std::uint64_t steps() const { return step_; }

 private:
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace attnfold
