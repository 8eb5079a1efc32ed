#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "attnfold/tensor.hpp"

namespace attnfold {

// Handle to a value recorded on a tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

template <typename T>
class BasicTape;

template <typename T>
void backward(BasicTape<T>& tape, Var loss);

// Ordered record of primitive applications. Nodes are appended in evaluation
// order, so reverse iteration is a valid reverse topological order.
//
// A node only records a backward rule when at least one input requires a
// gradient; a tape built purely from constants costs no more than eager code.
template <typename T>
class BasicTape {
 public:
  using BackwardFn = std::function<void(BasicTape&, std::size_t self)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(BasicTensor<T> value);
  // Borrowed, no gradient. The tensor must outlive the tape.
  Var constant_ref(const BasicTensor<T>& value);
  // Borrowed leaf whose gradient is accumulated into value.grad() by backward().
  Var param(BasicTensor<T>& value);

  const BasicTensor<T>& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Tape-local gradient of a node after backward(); empty when none reached it.
  std::span<const T> grad(Var v) const { return nodes_.at(v.id).grad; }

  std::size_t size() const { return nodes_.size(); }
  // Number of primitive applications (non-leaf nodes) recorded so far.
  std::size_t op_count() const { return op_count_; }
  // Number of backward rules executed by the last backward().
  std::size_t backward_visits() const { return backward_visits_; }
  // Bytes held by values produced by recorded primitives.
  std::size_t value_bytes() const { return value_bytes_; }

  // Used by primitives.
  Var record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(BasicTensor<T> value, const std::vector<Var>& inputs, BackwardFn fn);
  std::span<T> grad_buffer(std::size_t id);
  std::span<const T> out_grad(std::size_t id) const { return nodes_[id].grad; }

  friend void backward<T>(BasicTape<T>& tape, Var loss);

 private:
  struct Node {
    BasicTensor<T> owned;
    const BasicTensor<T>* borrowed = nullptr;
    BasicTensor<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn fn;
    std::vector<T> grad;
  };
  std::vector<Node> nodes_;
  std::size_t op_count_ = 0;
  std::size_t backward_visits_ = 0;
  std::size_t value_bytes_ = 0;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

// Reverse-mode sweep from a scalar loss; parameter leaves receive
// d(loss)/d(param) added into their grad().
template <typename T>
void backward(BasicTape<T>& tape, Var loss);

// ---- primitives -----------------------------------------------------------
// Implemented for float and double.

template <typename T>
Var matmul(BasicTape<T>& t, Var a, Var b);
template <typename T>
Var add(BasicTape<T>& t, Var a, Var b);
template <typename T>
Var add_n(BasicTape<T>& t, const std::vector<Var>& terms);
// x[r×c] + bias[c] broadcast over rows.
template <typename T>
Var add_bias(BasicTape<T>& t, Var x, Var bias);
template <typename T>
Var mul(BasicTape<T>& t, Var a, Var b);
template <typename T>
Var scale(BasicTape<T>& t, Var a, std::type_identity_t<T> s);
// a * s where s is a single-element tensor.
template <typename T>
Var scale_by(BasicTape<T>& t, Var a, Var s);
template <typename T>
Var gelu(BasicTape<T>& t, Var a);
template <typename T>
Var softmax_last(BasicTape<T>& t, Var x);

inline constexpr double kLayerNormEps = 1e-5;
template <typename T>
Var layer_norm(BasicTape<T>& t, Var x, Var gain, Var bias);

template <typename T>
Var embedding(BasicTape<T>& t, Var table, std::span<const std::uint32_t> tokens);
template <typename T>
Var slice_rows(BasicTape<T>& t, Var x, std::size_t begin, std::size_t end);
template <typename T>
Var slice_cols(BasicTape<T>& t, Var x, std::size_t begin, std::size_t end);
// Copy of x with one row overwritten; the overwritten row passes no gradient.
template <typename T>
Var replace_row(BasicTape<T>& t, Var x, std::size_t row, std::span<const std::type_identity_t<T>> values);
template <typename T>
Var sum(BasicTape<T>& t, Var x);
// Rotates each adjacent dimension pair within every d_head-wide block of
// row i by positions[i] * 10000^(-2j/d_head).
template <typename T>
Var rotary(BasicTape<T>& t, Var x, std::size_t d_head, std::span<const std::size_t> positions);
// Multi-head causal attention over q,k,v [t×(H·d_head)], scores scaled by
// 1/sqrt(d_head). Non-empty slopes add -slopes[h]*(i-j) to head h's scores.
template <typename T>
Var causal_attention(BasicTape<T>& t, Var q, Var k, Var v, std::size_t n_heads,
                     std::span<const std::type_identity_t<T>> slopes);
// Mean over positions with mask[i] of -log softmax(logits[i])[targets[i]].
template <typename T>
Var cross_entropy(BasicTape<T>& t, Var logits, std::span<const std::uint32_t> targets, const std::vector<bool>& mask);

}  // namespace attnfold
