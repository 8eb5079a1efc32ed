#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <vector>

#include "attnfold/tape.hpp"
#include "test_util.hpp"

namespace attnfold::testing {

// Builds the same random graph on every call; parameters are created on the
// first build and reused afterwards so they can be perturbed in place.
class RandomGraph {
 public:
  explicit RandomGraph(std::uint64_t seed) : seed_(seed) {}

  Var build(TapeD& t) {
    std::mt19937_64 rng(seed_);
    next_param_ = 0;
    auto pick = [&](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };
    const std::vector<std::uint32_t> tokens{0, 3, 6, 2, 3};
    Var x = embedding(t, param(t, {7, 6}, rng), tokens);
    std::vector<int> ops(6);
    for (int& op : ops) op = pick(15);
    // Guarantee the heavier primitives show up across the 20 graphs.
    ops[seed_ % 6] = static_cast<int>(seed_ % 15);
    for (int op : ops) {
      const TensorD& cur = t.value(x);
      const std::size_t r = cur.dim(0), c = cur.dim(1);
      switch (op) {
        case 0: x = matmul(t, x, param(t, {c, pick(2) ? 4U : 8U}, rng)); break;
        case 1: x = add(t, x, param(t, {r, c}, rng)); break;
        case 2: x = add_bias(t, x, param(t, {c}, rng)); break;
        case 3: x = mul(t, x, param(t, {r, c}, rng)); break;
        case 4: x = scale(t, x, 0.7F); break;
        case 5: x = scale_by(t, x, param(t, {1}, rng)); break;
        case 6: x = gelu(t, x); break;
        case 7: x = softmax_last(t, scale(t, x, 3.0F)); break;
        case 8: x = layer_norm(t, x, param(t, {c}, rng, 1.0F), param(t, {c}, rng)); break;
        case 9: x = c >= 4 ? slice_cols(t, x, c % 4 == 0 ? 2 : 0, c % 4 == 0 ? c : c - 2) : x; break;
        case 10: x = r >= 3 ? slice_rows(t, x, 1, r) : x; break;
        case 11: {
          std::vector<double> row(c);
          for (double& v : row) v = std::normal_distribution<float>(0.0F, 1.0F)(rng);
          x = replace_row(t, x, static_cast<std::size_t>(pick(static_cast<int>(r))), row);
          break;
        }
        case 12: {
          if (c % 2 == 0) {
            std::vector<std::size_t> pos(r);
            for (std::size_t i = 0; i < r; ++i) pos[i] = 3 * i + 1;
            x = rotary(t, x, 2, pos);
          }
          break;
        }
        case 13: {
          Var q = matmul(t, x, param(t, {c, c}, rng));
          Var k = matmul(t, x, param(t, {c, c}, rng));
          Var v = matmul(t, x, param(t, {c, c}, rng));
          const std::size_t heads = c % 2 == 0 ? 2 : 1;
          std::vector<double> slopes;
          if (pick(2)) slopes = {0.5, 0.25};
          slopes.resize(slopes.empty() ? 0 : heads);
          x = causal_attention(t, q, k, v, heads, slopes);
          break;
        }
        default: x = add_n(t, {x, matmul(t, x, param(t, {c, c}, rng)), x}); break;
      }
    }
    const TensorD& out = t.value(x);
    if (seed_ % 2 == 0) {
      std::vector<std::uint32_t> tg(out.dim(0));
      std::vector<bool> mask(out.dim(0), true);
      for (std::size_t i = 0; i < tg.size(); ++i) tg[i] = static_cast<std::uint32_t>(pick(static_cast<int>(out.dim(1))));
      mask[0] = false;
      return cross_entropy(t, x, tg, mask);
    }
    TensorD weights = random_tensor<double>(out.shape(), rng, 0.5F);
    return sum(t, mul(t, x, t.constant(std::move(weights))));
  }

  std::deque<TensorD>& params() { return params_; }

 private:
  Var param(TapeD& t, Shape shape, std::mt19937_64& rng, float center = 0.0F) {
    // Draw unconditionally so the rng stream is identical on every build.
    TensorD fresh = random_tensor<double>(shape, rng, 0.5F);
    for (double& v : fresh.data()) v += center;
    if (next_param_ == params_.size()) params_.push_back(std::move(fresh));
    return t.param(params_[next_param_++]);
  }

  std::uint64_t seed_;
  std::deque<TensorD> params_;
  std::size_t next_param_ = 0;
};


// Norm-wise relative error between reverse-mode and central-difference
// gradients (h = 1e-3) over every parameter of graph `seed`.
inline double gradient_check_error(std::uint64_t seed) {
  RandomGraph g(seed);
  {
    TapeD t;
    backward(t, g.build(t));
  }
  double num = 0.0, den_ad = 0.0, den_fd = 0.0;
  constexpr double h = 1e-3;
  for (auto& p : g.params()) {
    std::vector<double> ad(std::as_const(p).grad().begin(), std::as_const(p).grad().end());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      double fp, fm;
      {
        TapeD t;
        fp = t.value(g.build(t))[0];
      }
      p[i] = orig - h;
      {
        TapeD t;
        fm = t.value(g.build(t))[0];
      }
      p[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      num += (fd - ad[i]) * (fd - ad[i]);
      den_ad += ad[i] * ad[i];
      den_fd += fd * fd;
    }
  }
  return std::sqrt(num) / std::max({std::sqrt(den_ad), std::sqrt(den_fd), 1e-12});
}

}  // namespace attnfold::testing
