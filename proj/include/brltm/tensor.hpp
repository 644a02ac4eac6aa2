#pragma once

// Dense row-major tensors with a dynamic reverse-mode gradient tape.
//
// A Tensor is a shared handle to a node. Every operation on tensors that
// require gradients records a backward closure on its output node; calling
// backward() on a scalar walks the recorded graph in reverse topological order
// and accumulates gradients into every node that requires them. Leaves
// (parameters) keep their gradient buffers until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "brltm/error.hpp"
#include "brltm/rng.hpp"

namespace brltm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream o;
  o << '[';
  for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
  o << ']';
  return o.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  std::vector<Real>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

template <class Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                       " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> values() const { return node_->value; }
  std::span<Real> mutable_values() { return node_->value; }
  Real operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span when no gradient has reached this tensor.
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // New leaf holding a copy of the values.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), node_->value, requires_grad); }

  void backward();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <class Real>
void Tensor<Real>::backward() {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (node_->consumed) throw ContractError("backward() already ran on this graph");
  node_->consumed = true;
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn && !(*it)->grad.empty()) (*it)->backward_fn();
  // Release the graph; leaves keep their gradients.
  for (Node* n : order) {
    n->backward_fn = nullptr;
    n->parents.clear();
  }
}

namespace detail {

template <class Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> values,
                         std::initializer_list<const Tensor<Real>*> inputs) {
  Tensor<Real> out(std::move(shape), std::move(values));
  for (const auto* in : inputs)
    if (in->requires_grad()) {
      out.node()->requires_grad = true;
      break;
    }
  if (out.requires_grad())
    for (const auto* in : inputs) out.node()->parents.push_back(in->node_ptr());
  return out;
}

template <class Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> values, const std::vector<Tensor<Real>>& inputs) {
  Tensor<Real> out(std::move(shape), std::move(values));
  for (const auto& in : inputs)
    if (in.requires_grad()) out.node()->requires_grad = true;
  if (out.requires_grad())
    for (const auto& in : inputs) out.node()->parents.push_back(in.node_ptr());
  return out;
}

// C[M,N] += A[M,K] * B[K,N]
template <class Real>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const Real* A, const Real* B, Real* C) {
  for (std::size_t i = 0; i < M; ++i) {
    Real* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const Real a = A[i * K + k];
      const Real* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,K] += G[M,N] * B[K,N]^T
template <class Real>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const Real* G, const Real* B, Real* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const Real* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const Real* b = B + k * N;
      Real acc = 0;
      for (std::size_t j = 0; j < N; ++j) acc += g[j] * b[j];
      C[i * K + k] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * G[M,N]
template <class Real>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const Real* A, const Real* G, Real* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const Real* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const Real a = A[i * K + k];
      Real* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * g[j];
    }
  }
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                                               std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// (outer, extent, inner) decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// [..., M, K] x [..., K, N] -> [..., M, N]. `b` may also be a plain [K, N]
// matrix shared across the leading batch dimensions of `a`.
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto mismatch = [&] { return ShapeError("matmul " + shape_str(sa) + " x " + shape_str(sb)); };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t M = sa[sa.size() - 2], K = sa.back(), N = sb.back();
  if (sb[sb.size() - 2] != K) throw mismatch();
  const bool shared_b = sb.size() == 2 && sa.size() > 2;
  if (!shared_b && (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())))
    throw mismatch();
  const std::size_t batch = a.numel() / (M * K);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<Real> out(batch * M * N, Real(0));
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t t = 0; t < batch; ++t)
    detail::gemm_nn(M, K, N, A + t * M * K, B + (shared_b ? 0 : t * K * N), out.data() + t * M * N);
  auto res = detail::make_result(std::move(out_shape), std::move(out), {&a, &b});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      const Real* G = on->grad.data();
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t t = 0; t < batch; ++t)
          detail::gemm_nt(M, N, K, G + t * M * N, bn->value.data() + (shared_b ? 0 : t * K * N),
                          ga.data() + t * M * K);
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t t = 0; t < batch; ++t)
          detail::gemm_tn(M, K, N, an->value.data() + t * M * K, G + t * M * N,
                          gb.data() + (shared_b ? 0 : t * K * N));
      }
    };
  }
  return res;
}

// Swaps the last two axes.
template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t R = s[s.size() - 2], C = s.back(), batch = a.numel() / (R * C);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<Real> out(a.numel());
  const Real* x = a.values().data();
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) out[t * R * C + j * R + i] = x[t * R * C + i * C + j];
  auto res = detail::make_result(std::move(out_shape), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& ga = an->ensure_grad();
      for (std::size_t t = 0; t < batch; ++t)
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) ga[t * R * C + i * C + j] += on->grad[t * R * C + j * R + i];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Elementwise

// a + b where b has a's shape or a trailing suffix of it (broadcast over the
// leading dimensions of a).
template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size())))
    throw ShapeError("add " + shape_str(sa) + " + " + shape_str(sb));
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<Real> out(a.values().begin(), a.values().end());
  const Real* y = b.values().data();
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) out[i + j] += y[j];
  auto res = detail::make_result(sa, std::move(out), {&a, &b});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < n; i += m)
          for (std::size_t j = 0; j < m; ++j) gb[j] += on->grad[i + j];
      }
    };
  }
  return res;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  auto res = detail::make_result(a.shape(), std::move(out), {&a, &b});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += on->grad[i] * an->value[i];
      }
    };
  }
  return res;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  auto res = detail::make_result(a.shape(), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * on->grad[i];
    };
  }
  return res;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto res = detail::make_result(std::move(shape), std::vector<Real>(a.values().begin(), a.values().end()), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
    };
  }
  return res;
}

// Exact GELU: x * Phi(x).
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  const std::size_t n = a.numel();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = a[i];
    out[i] = x * Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
  }
  auto res = detail::make_result(a.shape(), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& ga = an->ensure_grad();
      const Real inv_sqrt_2pi = Real(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      for (std::size_t i = 0; i < n; ++i) {
        const Real x = an->value[i];
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
        const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * x * x);
        ga[i] += on->grad[i] * (cdf + x * pdf);
      }
    };
  }
  return res;
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  const std::size_t n = a.numel();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = a[i];
    out[i] = x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
  }
  auto res = detail::make_result(a.shape(), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * on->value[i] * (Real(1) - on->value[i]);
    };
  }
  return res;
}

// Inverted dropout: survivors are scaled by 1/(1-rate) in train mode; eval
// mode (or rate 0) returns the input unchanged.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& a, double rate, Rng& rng, bool train) {
  if (!train || rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const std::size_t n = a.numel();
  const Real keep_scale = Real(1.0 / (1.0 - rate));
  std::vector<Real> mask(n);
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < rate ? Real(0) : keep_scale;
    out[i] = a[i] * mask[i];
  }
  auto res = detail::make_result(a.shape(), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=, mask = std::move(mask)] {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * mask[i];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Structural

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, long axis = -1) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const auto& s0 = parts[0].shape();
  const std::size_t ax = detail::normalize_axis(axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
    if (!ok) throw ShapeError("concat " + shape_str(s0) + " with " + shape_str(s));
    out_shape[ax] += s[ax];
  }
  const auto outer = detail::split_at(out_shape, ax).outer;
  const auto inner = detail::split_at(out_shape, ax).inner;
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<Real> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().data() + o * row, row, out.data() + o * out_row + off);
    off += row;
  }
  auto res = detail::make_result(std::move(out_shape), std::move(out), parts);
  if (res.requires_grad()) {
    std::vector<std::pair<TensorNode<Real>*, std::size_t>> ins;
    for (const auto& p : parts) ins.emplace_back(p.node(), p.shape()[ax] * inner);
    auto* on = res.node();
    on->backward_fn = [=] {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        auto* n = ins[k].first;
        if (!n->requires_grad) continue;
        const std::size_t row = ins[k].second;
        auto& g = n->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < row; ++j) g[o * row + j] += on->grad[o * out_row + offsets[k] + j];
      }
    };
  }
  return res;
}

// Elements [begin, end) along `axis`.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto sp = detail::split_at(a.shape(), ax);
  if (begin > end || end > sp.extent)
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t in_row = sp.extent * sp.inner, row = (end - begin) * sp.inner, off = begin * sp.inner;
  std::vector<Real> out(sp.outer * row);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a.values().data() + o * in_row + off, row, out.data() + o * row);
  auto res = detail::make_result(std::move(out_shape), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    const std::size_t outer = sp.outer;
    on->backward_fn = [=] {
      auto& g = an->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < row; ++j) g[o * in_row + off + j] += on->grad[o * row + j];
    };
  }
  return res;
}

// [L, heads*d] -> [heads, L, d]
template <class Real>
Tensor<Real> split_heads(const Tensor<Real>& x, std::size_t heads) {
  if (x.rank() != 2 || heads == 0 || x.dim(1) % heads != 0)
    throw ShapeError("split_heads " + shape_str(x.shape()) + " into " + std::to_string(heads));
  const std::size_t L = x.dim(0), H = x.dim(1), d = H / heads;
  std::vector<Real> out(x.numel());
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(x.values().data() + l * H + h * d, d, out.data() + (h * L + l) * d);
  auto res = detail::make_result(Shape{heads, L, d}, std::move(out), {&x});
  if (res.requires_grad()) {
    auto* xn = x.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& g = xn->ensure_grad();
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < d; ++j) g[l * H + h * d + j] += on->grad[(h * L + l) * d + j];
    };
  }
  return res;
}

// [heads, L, d] -> [L, heads*d]
template <class Real>
Tensor<Real> merge_heads(const Tensor<Real>& x) {
  if (x.rank() != 3) throw ShapeError("merge_heads " + shape_str(x.shape()));
  const std::size_t heads = x.dim(0), L = x.dim(1), d = x.dim(2), H = heads * d;
  std::vector<Real> out(x.numel());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < L; ++l)
      std::copy_n(x.values().data() + (h * L + l) * d, d, out.data() + l * H + h * d);
  auto res = detail::make_result(Shape{L, H}, std::move(out), {&x});
  if (res.requires_grad()) {
    auto* xn = x.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& g = xn->ensure_grad();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t j = 0; j < d; ++j) g[(h * L + l) * d + j] += on->grad[l * H + h * d + j];
    };
  }
  return res;
}

// Rows of a [V, H] table -> [ids.size(), H].
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows from " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), H = table.dim(1);
  std::vector<Real> out(ids.size() * H);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw RangeError("row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(V) + " rows");
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.values().data() + rows[i] * H, H, out.data() + i * H);
  }
  auto res = detail::make_result(Shape{ids.size(), H}, std::move(out), {&table});
  if (res.requires_grad()) {
    auto* tn = table.node();
    auto* on = res.node();
    on->backward_fn = [=, rows = std::move(rows)] {
      auto& g = tn->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < H; ++j) g[rows[i] * H + j] += on->grad[i * H + j];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Normalization

// Softmax along `axis` with max subtraction. -inf entries map to exactly 0; a
// slice that is entirely -inf is a masking bug and raises ContractError.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto sp = detail::split_at(a.shape(), ax);
  std::vector<Real> out(a.numel());
  const Real* x = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      Real m = -std::numeric_limits<Real>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) m = std::max(m, x[base + k * sp.inner]);
      if (m == -std::numeric_limits<Real>::infinity())
        throw ContractError("softmax over a slice that is entirely -inf");
      Real sum = 0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const Real e = std::exp(x[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= sum;
    }
  auto res = detail::make_result(a.shape(), std::move(out), {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& g = an->ensure_grad();
      const Real* y = on->value.data();
      const Real* gy = on->grad.data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.extent * sp.inner + in;
          Real dot = 0;
          for (std::size_t k = 0; k < sp.extent; ++k) dot += gy[base + k * sp.inner] * y[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.extent; ++k) {
            const std::size_t i = base + k * sp.inner;
            g[i] += y[i] * (gy[i] - dot);
          }
        }
    };
  }
  return res;
}

// Standardizes each last-axis vector, then applies gain and bias.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-12)) {
  const std::size_t H = x.shape().back();
  if (H == 0 || gain.shape() != Shape{H} || bias.shape() != Shape{H})
    throw ShapeError("layer_norm " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                     " bias " + shape_str(bias.shape()));
  const std::size_t rows = x.numel() / H;
  std::vector<Real> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const Real* in = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* v = in + r * H;
    Real mean = 0;
    for (std::size_t j = 0; j < H; ++j) mean += v[j];
    mean /= Real(H);
    Real var = 0;
    for (std::size_t j = 0; j < H; ++j) var += (v[j] - mean) * (v[j] - mean);
    var /= Real(H);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < H; ++j) {
      xhat[r * H + j] = (v[j] - mean) * inv_std[r];
      out[r * H + j] = xhat[r * H + j] * gain[j] + bias[j];
    }
  }
  auto res = detail::make_result(x.shape(), std::move(out), {&x, &gain, &bias});
  if (res.requires_grad()) {
    auto* xn = x.node();
    auto* gn = gain.node();
    auto* bn = bias.node();
    auto* on = res.node();
    on->backward_fn = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const Real* gy = on->grad.data();
      if (gn->requires_grad) {
        auto& gg = gn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < H; ++j) gg[j] += gy[r * H + j] * xhat[r * H + j];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < H; ++j) gb[j] += gy[r * H + j];
      }
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < H; ++j) {
            const Real d = gy[r * H + j] * gn->value[j];
            mean_d += d;
            mean_dx += d * xhat[r * H + j];
          }
          mean_d /= Real(H);
          mean_dx /= Real(H);
          for (std::size_t j = 0; j < H; ++j) {
            const Real d = gy[r * H + j] * gn->value[j];
            gx[r * H + j] += inv_std[r] * (d - mean_d - xhat[r * H + j] * mean_dx);
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (auto v : a.values()) s += v;
  auto res = detail::make_result(Shape{1}, std::vector<Real>{s}, {&a});
  if (res.requires_grad()) {
    auto* an = a.node();
    auto* on = res.node();
    on->backward_fn = [=] {
      auto& g = an->ensure_grad();
      for (auto& v : g) v += on->grad[0];
    };
  }
  return res;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / Real(a.numel()));
}

// Mean over non-ignored rows of -log softmax(logits[i])[targets[i]].
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const std::int32_t> targets,
                           std::int32_t ignore_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  std::size_t count = 0;
  Real total = 0;
  std::vector<Real> lse(N, Real(0));
  const Real* x = logits.values().data();
  for (std::size_t i = 0; i < N; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V)
      throw RangeError("target " + std::to_string(targets[i]) + " outside " + std::to_string(V) + " classes");
    const Real* row = x + i * V;
    const Real m = *std::max_element(row, row + V);
    Real s = 0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
    lse[i] = m + std::log(s);
    total += lse[i] - row[targets[i]];
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy with every target ignored");
  auto res = detail::make_result(Shape{1}, std::vector<Real>{total / Real(count)}, {&logits});
  if (res.requires_grad()) {
    auto* ln = logits.node();
    auto* on = res.node();
    std::vector<std::int32_t> t(targets.begin(), targets.end());
    on->backward_fn = [=, t = std::move(t), lse = std::move(lse)] {
      auto& g = ln->ensure_grad();
      const Real scale_g = on->grad[0] / Real(count);
      for (std::size_t i = 0; i < N; ++i) {
        if (t[i] == ignore_id) continue;
        for (std::size_t j = 0; j < V; ++j)
          g[i * V + j] += scale_g * std::exp(ln->value[i * V + j] - lse[i]);
        g[i * V + static_cast<std::size_t>(t[i])] -= scale_g;
      }
    };
  }
  return res;
}

// Mean binary log-loss of raw logits against {0,1} labels.
template <class Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& logits, std::span<const int> labels) {
  if (logits.numel() != labels.size() || labels.empty())
    throw ShapeError("bce_with_logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t n = labels.size();
  Real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real z = logits[i];
    const Real y = Real(labels[i]);
    total += std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto res = detail::make_result(Shape{1}, std::vector<Real>{total / Real(n)}, {&logits});
  if (res.requires_grad()) {
    auto* ln = logits.node();
    auto* on = res.node();
    std::vector<int> y(labels.begin(), labels.end());
    on->backward_fn = [=, y = std::move(y)] {
      auto& g = ln->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const Real z = ln->value[i];
        const Real p = z >= 0 ? Real(1) / (Real(1) + std::exp(-z)) : std::exp(z) / (Real(1) + std::exp(z));
        g[i] += on->grad[0] * (p - Real(y[i])) / Real(n);
      }
    };
  }
  return res;
}

}  // namespace brltm
