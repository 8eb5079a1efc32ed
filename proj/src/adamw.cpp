#include "attnfold/adamw.hpp"

#include <cmath>
#include <stdexcept>

namespace attnfold {

void AdamW::step(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (float g : std::as_const(*p.tensor).grad()) {
      if (!std::isfinite(g)) throw std::domain_error("adamw: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->numel(), 0.0F);
      v_.emplace_back(p.tensor->numel(), 0.0F);
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("adamw: parameter list changed between steps");
  ++step_;
  const auto t = static_cast<double>(step_);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta2), t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = *params[k].tensor;
    if (!w.has_grad()) continue;
    auto g = std::as_const(w).grad();
    auto data = w.data();
    auto& m = m_[k];
    auto& v = v_[k];
    const float lr = config_.lr * params[k].lr_scale;
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0F - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0F - config_.beta2) * g[i] * g[i];
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      data[i] -= lr * config_.weight_decay * data[i];
      data[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace attnfold
