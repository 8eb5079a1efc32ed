#include "attnfold/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace attnfold {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const BasicTensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
template <typename T>
ConstMatMap<T> as_mat(std::span<const T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
template <typename T>
MatMap<T> as_mat(std::span<T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void require_rank2(const char* op, const BasicTensor<T>& x) {
  if (x.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

template <typename T>
void require_finite(const char* op, const BasicTensor<T>& x) {
  if (!x.all_finite()) throw std::domain_error(std::string(op) + ": non-finite input");
}

template <typename T>
void accumulate(BasicTape<T>& t, Var v, std::span<const std::type_identity_t<T>> g) {
  if (!t.requires_grad(v)) return;
  auto dst = t.grad_buffer(v.id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

// ---- Tape -----------------------------------------------------------------

template <typename T>
Var BasicTape<T>::constant(BasicTensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::constant_ref(const BasicTensor<T>& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::param(BasicTensor<T>& value) {
  Node n;
  n.borrowed = &value;
  n.param = &value;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& BasicTape<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.borrowed ? *n.borrowed : n.owned;
}

template <typename T>
Var BasicTape<T>::record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

template <typename T>
Var BasicTape<T>::record(BasicTensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in.id).requires_grad;
  if (n.requires_grad) n.fn = std::move(fn);
  value_bytes_ += n.owned.numel() * sizeof(T);
  nodes_.push_back(std::move(n));
  ++op_count_;
  return Var{nodes_.size() - 1};
}

template <typename T>
std::span<T> BasicTape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(Var{id}).numel(), T(0.0));
  return n.grad;
}

template <typename T>
void backward(BasicTape<T>& tape, Var loss) {
  const BasicTensor<T>& lv = tape.value(loss);
  if (lv.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(lv.shape()));
  tape.backward_visits_ = 0;
  for (auto& n : tape.nodes_) n.grad.clear();
  if (!tape.requires_grad(loss)) return;
  tape.grad_buffer(loss.id)[0] = T(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = tape.nodes_[i];
    if (n.grad.empty()) continue;
    if (n.fn) {
      n.fn(tape, i);
      ++tape.backward_visits_;
    }
  }
  for (auto& n : tape.nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto dst = n.param->grad();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
  }
}

// ---- primitives -----------------------------------------------------------

template <typename T>
Var matmul(BasicTape<T>& t, Var a, Var b) {
  const BasicTensor<T>& A = t.value(a);
  const BasicTensor<T>& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_error("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), p = B.dim(1);
  BasicTensor<T> out({m, p});
  as_mat(out.data(), m, p).noalias() = as_mat(A) * as_mat(B);
  return t.record(std::move(out), {a, b}, [a, b, m, k, p](BasicTape<T>& tp, std::size_t self) {
    auto G = as_mat(tp.out_grad(self), m, p);
    if (tp.requires_grad(a)) as_mat(tp.grad_buffer(a.id), m, k).noalias() += G * as_mat(tp.value(b)).transpose();
    if (tp.requires_grad(b)) as_mat(tp.grad_buffer(b.id), k, p).noalias() += as_mat(tp.value(a)).transpose() * G;
  });
}

template <typename T>
Var add(BasicTape<T>& t, Var a, Var b) {
  const BasicTensor<T>& A = t.value(a);
  const BasicTensor<T>& B = t.value(b);
  if (A.shape() != B.shape()) shape_error("add", A.shape(), B.shape());
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[i];
  return t.record(std::move(out), {a, b}, [a, b](BasicTape<T>& tp, std::size_t self) {
    accumulate(tp, a, tp.out_grad(self));
    accumulate(tp, b, tp.out_grad(self));
  });
}

template <typename T>
Var add_n(BasicTape<T>& t, const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no terms");
  const BasicTensor<T>& first = t.value(terms[0]);
  BasicTensor<T> out(first.shape());
  for (Var v : terms) {
    const BasicTensor<T>& x = t.value(v);
    if (x.shape() != first.shape()) shape_error("add_n", first.shape(), x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += x[i];
  }
  return t.record(std::move(out), terms, [terms](BasicTape<T>& tp, std::size_t self) {
    for (Var v : terms) accumulate(tp, v, tp.out_grad(self));
  });
}

template <typename T>
Var add_bias(BasicTape<T>& t, Var x, Var bias) {
  const BasicTensor<T>& X = t.value(x);
  const BasicTensor<T>& b = t.value(bias);
  if (b.numel() != X.cols()) shape_error("add_bias", X.shape(), b.shape());
  BasicTensor<T> out = X;
  out.clear_grad();
  const std::size_t r = X.rows(), c = X.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b[j];
  return t.record(std::move(out), {x, bias}, [x, bias, r, c](BasicTape<T>& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    accumulate(tp, x, g);
    if (tp.requires_grad(bias)) {
      auto gb = tp.grad_buffer(bias.id);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

template <typename T>
Var mul(BasicTape<T>& t, Var a, Var b) {
  const BasicTensor<T>& A = t.value(a);
  const BasicTensor<T>& B = t.value(b);
  if (A.shape() != B.shape()) shape_error("mul", A.shape(), B.shape());
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[i];
  return t.record(std::move(out), {a, b}, [a, b](BasicTape<T>& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const BasicTensor<T>& A = tp.value(a);
    const BasicTensor<T>& B = tp.value(b);
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

template <typename T>
Var scale(BasicTape<T>& t, Var a, std::type_identity_t<T> s) {
  const BasicTensor<T>& A = t.value(a);
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * s;
  return t.record(std::move(out), {a}, [a, s](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    auto g = tp.out_grad(self);
    auto ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Var scale_by(BasicTape<T>& t, Var a, Var s) {
  const BasicTensor<T>& A = t.value(a);
  const BasicTensor<T>& S = t.value(s);
  if (S.numel() != 1) throw std::invalid_argument("scale_by: scale must have one element, got " + shape_str(S.shape()));
  const T sv = S[0];
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * sv;
  return t.record(std::move(out), {a, s}, [a, s](BasicTape<T>& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const BasicTensor<T>& A = tp.value(a);
    const T sv = tp.value(s)[0];
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    }
    if (tp.requires_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * A[i];
      tp.grad_buffer(s.id)[0] += static_cast<T>(acc);
    }
  });
}

template <typename T>
Var gelu(BasicTape<T>& t, Var a) {
  const BasicTensor<T>& A = t.value(a);
  BasicTensor<T> out(A.shape());
  constexpr T kInvSqrt2 = T(0.70710678118654752);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T(0.5) * A[i] * (T(1.0) + std::erf(A[i] * kInvSqrt2));
  return t.record(std::move(out), {a}, [a](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    constexpr T kInvSqrt2 = T(0.70710678118654752);
    constexpr T kInvSqrt2Pi = T(0.39894228040143268);
    auto g = tp.out_grad(self);
    const BasicTensor<T>& A = tp.value(a);
    auto ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = A[i];
      const T cdf = T(0.5) * (T(1.0) + std::erf(x * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(-T(0.5) * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Var softmax_last(BasicTape<T>& t, Var x) {
  const BasicTensor<T>& X = t.value(x);
  if (X.cols() == 0) throw std::invalid_argument("softmax_last: empty last axis");
  require_finite("softmax_last", X);
  BasicTensor<T> out(X.shape());
  const std::size_t r = X.rows(), c = X.cols();
  for (std::size_t i = 0; i < r; ++i) {
    auto in = X.row(i);
    auto o = out.row(i);
    T mx = in[0];
    for (T v : in) mx = std::max(mx, v);
    T s = T(0.0);
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (T& v : o) v /= s;
  }
  return t.record(std::move(out), {x}, [x, r, c](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    auto g = tp.out_grad(self);
    const BasicTensor<T>& Y = tp.value(Var{self});
    auto gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = T(0.0);
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += Y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

template <typename T>
Var layer_norm(BasicTape<T>& t, Var x, Var gain, Var bias) {
  const BasicTensor<T>& X = t.value(x);
  const BasicTensor<T>& G = t.value(gain);
  const BasicTensor<T>& B = t.value(bias);
  const std::size_t r = X.rows(), c = X.cols();
  if (c == 0) throw std::invalid_argument("layer_norm: empty last axis");
  if (G.numel() != c) shape_error("layer_norm", X.shape(), G.shape());
  if (B.numel() != c) shape_error("layer_norm", X.shape(), B.shape());
  BasicTensor<T> out(X.shape());
  std::vector<T> xhat(X.numel());
  std::vector<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto in = X.row(i);
    T mean = T(0.0);
    for (T v : in) mean += v;
    mean /= static_cast<T>(c);
    T var = T(0.0);
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(c);
    const T is = T(1.0) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (in[j] - mean) * is;
      xhat[i * c + j] = xh;
      out[i * c + j] = xh * G[j] + B[j];
    }
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](BasicTape<T>& tp,
                                                                                               std::size_t self) {
                    auto g = tp.out_grad(self);
                    const BasicTensor<T>& G = tp.value(gain);
                    if (tp.requires_grad(gain)) {
                      auto gg = tp.grad_buffer(gain.id);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                    if (tp.requires_grad(bias)) {
                      auto gb = tp.grad_buffer(bias.id);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                    }
                    if (!tp.requires_grad(x)) return;
                    auto gx = tp.grad_buffer(x.id);
                    const T inv_c = T(1.0) / static_cast<T>(c);
                    for (std::size_t i = 0; i < r; ++i) {
                      T m1 = T(0.0), m2 = T(0.0);
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = g[i * c + j] * G[j];
                        m1 += d;
                        m2 += d * xhat[i * c + j];
                      }
                      m1 *= inv_c;
                      m2 *= inv_c;
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = g[i * c + j] * G[j];
                        gx[i * c + j] += inv_std[i] * (d - m1 - xhat[i * c + j] * m2);
                      }
                    }
                  });
}

template <typename T>
Var embedding(BasicTape<T>& t, Var table, std::span<const std::uint32_t> tokens) {
  const BasicTensor<T>& tab = t.value(table);
  require_rank2("embedding", tab);
  const std::size_t vocab = tab.dim(0), d = tab.dim(1);
  BasicTensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab) {
      throw std::out_of_range("embedding: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                              " exceeds vocabulary " + std::to_string(vocab));
    }
    auto src = tab.row(tokens[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::uint32_t> ids(tokens.begin(), tokens.end());
  return t.record(std::move(out), {table}, [table, d, ids = std::move(ids)](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(table)) return;
    auto g = tp.out_grad(self);
    auto gt = tp.grad_buffer(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
  });
}

template <typename T>
Var slice_rows(BasicTape<T>& t, Var x, std::size_t begin, std::size_t end) {
  const BasicTensor<T>& X = t.value(x);
  require_rank2("slice_rows", X);
  if (begin > end || end > X.dim(0)) {
    throw std::out_of_range("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") outside " + shape_str(X.shape()));
  }
  const std::size_t c = X.dim(1);
  BasicTensor<T> out({end - begin, c});
  std::copy(X.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
            X.data().begin() + static_cast<std::ptrdiff_t>(end * c), out.data().begin());
  return t.record(std::move(out), {x}, [x, begin, c](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    auto g = tp.out_grad(self);
    auto gx = tp.grad_buffer(x.id).subspan(begin * c, g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var slice_cols(BasicTape<T>& t, Var x, std::size_t begin, std::size_t end) {
  const BasicTensor<T>& X = t.value(x);
  require_rank2("slice_cols", X);
  if (begin > end || end > X.dim(1)) {
    throw std::out_of_range("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") outside " + shape_str(X.shape()));
  }
  const std::size_t r = X.dim(0), c = X.dim(1), w = end - begin;
  BasicTensor<T> out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = X[i * c + begin + j];
  return t.record(std::move(out), {x}, [x, begin, r, c, w](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    auto g = tp.out_grad(self);
    auto gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
  });
}

template <typename T>
Var replace_row(BasicTape<T>& t, Var x, std::size_t row, std::span<const std::type_identity_t<T>> values) {
  const BasicTensor<T>& X = t.value(x);
  if (row >= X.rows()) {
    throw std::out_of_range("replace_row: row " + std::to_string(row) + " outside " + shape_str(X.shape()));
  }
  if (values.size() != X.cols()) {
    throw std::invalid_argument("replace_row: replacement has " + std::to_string(values.size()) +
                                " values, row has " + std::to_string(X.cols()));
  }
  BasicTensor<T> out = X;
  out.clear_grad();
  std::copy(values.begin(), values.end(), out.row(row).begin());
  const std::size_t c = X.cols();
  return t.record(std::move(out), {x}, [x, row, c](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    auto g = tp.out_grad(self);
    auto gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (i / c != row) gx[i] += g[i];
    }
  });
}

template <typename T>
Var sum(BasicTape<T>& t, Var x) {
  const BasicTensor<T>& X = t.value(x);
  double s = 0.0;
  for (T v : X.data()) s += v;
  return t.record(BasicTensor<T>::scalar(static_cast<T>(s)), {x}, [x](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const T g = tp.out_grad(self)[0];
    for (T& v : tp.grad_buffer(x.id)) v += g;
  });
}

namespace {

// Rotates pairs in place; sign = -1 applies the inverse rotation.
template <typename T>
void rotate_rows(std::span<std::type_identity_t<T>> data, std::size_t cols, std::size_t d_head, std::span<const std::size_t> positions,
                 T sign) {
  const std::size_t heads = cols / d_head;
  const std::size_t half = d_head / 2;
  std::vector<double> freq(half);
  for (std::size_t j = 0; j < half; ++j) {
    freq[j] = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d_head));
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double pos = static_cast<double>(positions[i]);
    for (std::size_t j = 0; j < half; ++j) {
      const double ang = pos * freq[j];
      const T c = static_cast<T>(std::cos(ang));
      const T s = sign * static_cast<T>(std::sin(ang));
      for (std::size_t h = 0; h < heads; ++h) {
        T* p = data.data() + i * cols + h * d_head + 2 * j;
        const T a = p[0], b = p[1];
        p[0] = a * c - b * s;
        p[1] = a * s + b * c;
      }
    }
  }
}

}  // namespace

template <typename T>
Var rotary(BasicTape<T>& t, Var x, std::size_t d_head, std::span<const std::size_t> positions) {
  const BasicTensor<T>& X = t.value(x);
  require_rank2("rotary", X);
  if (d_head == 0 || d_head % 2 != 0) throw std::invalid_argument("rotary: d_head must be even and positive");
  if (X.dim(1) % d_head != 0) throw std::invalid_argument("rotary: width not a multiple of d_head");
  if (positions.size() != X.dim(0)) throw std::invalid_argument("rotary: one position per row required");
  BasicTensor<T> out = X;
  out.clear_grad();
  const std::size_t cols = X.dim(1);
  rotate_rows<T>(out.data(), cols, d_head, positions, T(1.0));
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return t.record(std::move(out), {x}, [x, cols, d_head, pos = std::move(pos)](BasicTape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    std::vector<T> g(tp.out_grad(self).begin(), tp.out_grad(self).end());
    rotate_rows<T>(g, cols, d_head, pos, -T(1.0));
    accumulate(tp, x, g);
  });
}

template <typename T>
Var causal_attention(BasicTape<T>& t, Var q, Var k, Var v, std::size_t n_heads,
                     std::span<const std::type_identity_t<T>> slopes) {
  const BasicTensor<T>& Q = t.value(q);
  const BasicTensor<T>& K = t.value(k);
  const BasicTensor<T>& Vv = t.value(v);
  require_rank2("causal_attention", Q);
  if (K.shape() != Q.shape()) shape_error("causal_attention", Q.shape(), K.shape());
  if (Vv.shape() != Q.shape()) shape_error("causal_attention", Q.shape(), Vv.shape());
  if (n_heads == 0 || Q.dim(1) % n_heads != 0) throw std::invalid_argument("causal_attention: bad head count");
  if (!slopes.empty() && slopes.size() != n_heads) throw std::invalid_argument("causal_attention: one slope per head");
  const std::size_t len = Q.dim(0), width = Q.dim(1), dh = width / n_heads;
  const auto L = static_cast<Eigen::Index>(len);
  const auto D = static_cast<Eigen::Index>(dh);
  const T inv_scale = T(1.0) / std::sqrt(static_cast<T>(dh));

  BasicTensor<T> out({len, width});
  std::vector<RowMat<T>> probs(n_heads);
  auto Qm = as_mat(Q);
  auto Km = as_mat(K);
  auto Vm = as_mat(Vv);
  auto Om = as_mat(out.data(), len, width);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    RowMat<T> S = (Qm.block(0, c0, L, D) * Km.block(0, c0, L, D).transpose()) * inv_scale;
    const T slope = slopes.empty() ? T(0.0) : slopes[h];
    for (Eigen::Index i = 0; i < L; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        S(i, j) -= slope * static_cast<T>(i - j);
        mx = std::max(mx, S(i, j));
      }
      T s = T(0.0);
      for (Eigen::Index j = 0; j <= i; ++j) {
        S(i, j) = std::exp(S(i, j) - mx);
        s += S(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) S(i, j) /= s;
      for (Eigen::Index j = i + 1; j < L; ++j) S(i, j) = T(0.0);
    }
    Om.block(0, c0, L, D).noalias() = S * Vm.block(0, c0, L, D);
    probs[h] = std::move(S);
  }
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, n_heads, len, width, dh, inv_scale, probs = std::move(probs)](BasicTape<T>& tp, std::size_t self) {
                    const auto L = static_cast<Eigen::Index>(len);
                    const auto D = static_cast<Eigen::Index>(dh);
                    auto G = as_mat(tp.out_grad(self), len, width);
                    auto Qm = as_mat(tp.value(q));
                    auto Km = as_mat(tp.value(k));
                    auto Vm = as_mat(tp.value(v));
                    const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const auto c0 = static_cast<Eigen::Index>(h * dh);
                      const RowMat<T>& P = probs[h];
                      auto Gh = G.block(0, c0, L, D);
                      if (gv) as_mat(tp.grad_buffer(v.id), len, width).block(0, c0, L, D).noalias() += P.transpose() * Gh;
                      if (!gq && !gk) continue;
                      RowMat<T> dP = Gh * Vm.block(0, c0, L, D).transpose();
                      RowMat<T> dS = RowMat<T>::Zero(L, L);
                      for (Eigen::Index i = 0; i < L; ++i) {
                        T dot = T(0.0);
                        for (Eigen::Index j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
                        for (Eigen::Index j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_scale;
                      }
                      if (gq) {
                        as_mat(tp.grad_buffer(q.id), len, width).block(0, c0, L, D).noalias() +=
                            dS * Km.block(0, c0, L, D);
                      }
                      if (gk) {
                        as_mat(tp.grad_buffer(k.id), len, width).block(0, c0, L, D).noalias() +=
                            dS.transpose() * Qm.block(0, c0, L, D);
                      }
                    }
                  });
}

template <typename T>
Var cross_entropy(BasicTape<T>& t, Var logits, std::span<const std::uint32_t> targets, const std::vector<bool>& mask) {
  const BasicTensor<T>& X = t.value(logits);
  require_rank2("cross_entropy", X);
  const std::size_t len = X.dim(0), vocab = X.dim(1);
  if (targets.size() != len || mask.size() != len) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(len) + " logit rows but " +
                                std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                                " mask entries");
  }
  std::size_t count = 0;
  for (bool m : mask) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  require_finite("cross_entropy", X);
  std::vector<T> probs(X.numel(), T(0.0));
  double loss = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " exceeds vocabulary " +
                              std::to_string(vocab));
    }
    auto row = X.row(i);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (T v : row) s += std::exp(static_cast<double>(v - mx));
    const double log_z = static_cast<double>(mx) + std::log(s);
    loss += log_z - static_cast<double>(row[targets[i]]);
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
    }
  }
  loss /= static_cast<double>(count);
  std::vector<std::uint32_t> tg(targets.begin(), targets.end());
  return t.record(BasicTensor<T>::scalar(static_cast<T>(loss)), {logits},
                  [logits, vocab, count, mask, tg = std::move(tg), probs = std::move(probs)](BasicTape<T>& tp,
                                                                                            std::size_t self) {
                    if (!tp.requires_grad(logits)) return;
                    const T g = tp.out_grad(self)[0] / static_cast<T>(count);
                    auto gx = tp.grad_buffer(logits.id);
                    for (std::size_t i = 0; i < tg.size(); ++i) {
                      if (!mask[i]) continue;
                      for (std::size_t j = 0; j < vocab; ++j) gx[i * vocab + j] += g * probs[i * vocab + j];
                      gx[i * vocab + tg[i]] -= g;
                    }
                  });
}

#define ATTNFOLD_INSTANTIATE_TAPE(T)                                                                               \
  template class BasicTape<T>;                                                                                 \
  template void backward<T>(BasicTape<T>&, Var);                                                               \
  template Var matmul<T>(BasicTape<T>&, Var, Var);                                                             \
  template Var add<T>(BasicTape<T>&, Var, Var);                                                                \
  template Var add_n<T>(BasicTape<T>&, const std::vector<Var>&);                                               \
  template Var add_bias<T>(BasicTape<T>&, Var, Var);                                                           \
  template Var mul<T>(BasicTape<T>&, Var, Var);                                                                \
  template Var scale<T>(BasicTape<T>&, Var, T);                                                                \
  template Var scale_by<T>(BasicTape<T>&, Var, Var);                                                           \
  template Var gelu<T>(BasicTape<T>&, Var);                                                                    \
  template Var softmax_last<T>(BasicTape<T>&, Var);                                                            \
  template Var layer_norm<T>(BasicTape<T>&, Var, Var, Var);                                                    \
  template Var embedding<T>(BasicTape<T>&, Var, std::span<const std::uint32_t>);                               \
  template Var slice_rows<T>(BasicTape<T>&, Var, std::size_t, std::size_t);                                    \
  template Var slice_cols<T>(BasicTape<T>&, Var, std::size_t, std::size_t);                                    \
  template Var replace_row<T>(BasicTape<T>&, Var, std::size_t, std::span<const T>);                            \
  template Var sum<T>(BasicTape<T>&, Var);                                                                     \
  template Var rotary<T>(BasicTape<T>&, Var, std::size_t, std::span<const std::size_t>);                       \
  template Var causal_attention<T>(BasicTape<T>&, Var, Var, Var, std::size_t, std::span<const T>);             \
  template Var cross_entropy<T>(BasicTape<T>&, Var, std::span<const std::uint32_t>, const std::vector<bool>&);

ATTNFOLD_INSTANTIATE_TAPE(float)
ATTNFOLD_INSTANTIATE_TAPE(double)

}  // namespace attnfold
