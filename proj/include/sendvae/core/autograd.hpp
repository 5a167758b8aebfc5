#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Var is a handle on a graph node. Ops record their parents and a backward
// closure only when gradient recording is enabled and at least one input
// requires a gradient, so evaluation-only passes build no graph.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sendvae/core/error.hpp"
#include "sendvae/core/tensor.hpp"

namespace sendvae::ad {

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  ArrayX<T> grad;  // empty until something flows in
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  ArrayX<T>& grad_buffer() {
    if (grad.size() == 0) grad = ArrayX<T>::Zero(value.size());
    return grad;
  }
  void zero_grad() { grad.resize(0); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node(std::make_shared<Node<T>>()) {
    node->value = std::move(value);
    node->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node->value; }
  Tensor<T>& mutable_value() { return node->value; }
  const Shape& shape() const { return node->value.shape; }
  Index dim(Index i) const { return node->value.dim(i); }
  Index size() const { return node->value.size(); }
  bool requires_grad() const { return node && node->requires_grad; }
  const ArrayX<T>& grad() const { return node->grad; }
  T item() const { return node->value.data[0]; }

  std::shared_ptr<Node<T>> node;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

namespace detail {

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  Var<T> out(std::move(value), false);
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node->requires_grad = true;
  out.node->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node->parents.push_back(in.node);
  out.node->backward = std::move(fn);
  return out;
}

template <typename T>
inline bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <typename T>
inline ArrayX<T>& pgrad(Node<T>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

inline void check_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// Runs backpropagation from a scalar root, accumulating into leaf grads.
template <typename T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw ConfigError("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node.get(), 0}};
  seen.insert(root.node.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node->grad_buffer().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior grads are no longer needed once propagated.
  for (Node<T>* n : order)
    if (n->backward) n->grad.resize(0);
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape(), a.value().data + b.value().data);
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) detail::pgrad(self, 1) += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape(), a.value().data - b.value().data);
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) detail::pgrad(self, 1) -= self.grad;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape(), a.value().data * b.value().data);
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad * self.parents[1]->value.data;
    if (detail::wants(self, 1)) detail::pgrad(self, 1) += self.grad * self.parents[0]->value.data;
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), a.value().data * s);
  return detail::make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    detail::pgrad(self, 0) += self.grad * s;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), a.value().data + s);
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) { detail::pgrad(self, 0) += self.grad; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().data.square());
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::pgrad(self, 0) += self.grad * T(2) * self.parents[0]->value.data;
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().data.exp());
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::pgrad(self, 0) += self.grad * self.value.data;
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape(), T(1) / (T(1) + (-a.value().data).exp()));
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& y = self.value.data;
    detail::pgrad(self, 0) += self.grad * y * (T(1) - y);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().data.tanh());
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& y = self.value.data;
    detail::pgrad(self, 0) += self.grad * (T(1) - y.square());
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().data.max(T(0)));
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::pgrad(self, 0) += (self.parents[0]->value.data > T(0)).template cast<T>() * self.grad;
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  const auto& x = a.value().data;
  ArrayX<T> sig = T(1) / (T(1) + (-x).exp());
  Tensor<T> out(a.shape(), x * sig);
  return detail::make_result<T>(std::move(out), {a}, [sig = std::move(sig)](Node<T>& self) {
    const auto& x = self.parents[0]->value.data;
    detail::pgrad(self, 0) += self.grad * sig * (T(1) + x * (T(1) - sig));
  });
}

// tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  const auto& x = a.value().data;
  ArrayX<T> th = (c * (x + k * x.cube())).tanh();
  Tensor<T> out(a.shape(), T(0.5) * x * (T(1) + th));
  return detail::make_result<T>(std::move(out), {a}, [th = std::move(th), c, k](Node<T>& self) {
    const auto& x = self.parents[0]->value.data;
    ArrayX<T> d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square());
    detail::pgrad(self, 0) += self.grad * d;
  });
}

// Gradient is zero where the input was clipped.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape(), a.value().data.max(lo).min(hi));
  return detail::make_result<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    const auto& x = self.parents[0]->value.data;
    detail::pgrad(self, 0) += self.grad * ((x >= lo) && (x <= hi)).template cast<T>();
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out(Shape{1});
  out.data[0] = a.value().data.sum();
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::pgrad(self, 0) += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Mean squared difference against a constant target.
template <typename T>
Var<T> mse(const Var<T>& a, const Tensor<T>& target) {
  detail::check_same(a.shape(), target.shape, "mse");
  const T n = static_cast<T>(a.size());
  ArrayX<T> diff = a.value().data - target.data;
  Tensor<T> out(Shape{1});
  out.data[0] = diff.square().sum() / n;
  return detail::make_result<T>(std::move(out), {a}, [diff = std::move(diff), n](Node<T>& self) {
    detail::pgrad(self, 0) += self.grad[0] * T(2) / n * diff;
  });
}

// Sums a list of scalar vars with weights.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<Var<T>, T>>& terms) {
  std::vector<Var<T>> inputs;
  std::vector<T> weights;
  Tensor<T> out(Shape{1});
  for (const auto& [v, w] : terms) {
    if (v.size() != 1) throw ConfigError("weighted_sum: terms must be scalars");
    out.data[0] += w * v.item();
    inputs.push_back(v);
    weights.push_back(w);
  }
  return detail::make_result<T>(std::move(out), inputs, [weights](Node<T>& self) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (detail::wants(self, i)) detail::pgrad(self, i)[0] += weights[i] * self.grad[0];
  });
}

// ---------------------------------------------------------------- broadcasting

// x: [..., C], b: [C].
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const Index c = b.size();
  if (x.shape().empty() || x.shape().back() != c)
    throw ConfigError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  const Index rows = x.size() / c;
  Tensor<T> out = x.value();
  out.as_matrix(rows, c).rowwise() += b.value().data.matrix().transpose();
  return detail::make_result<T>(std::move(out), {x, b}, [rows, c](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) {
      ConstMapRM<T> g(self.grad.data(), rows, c);
      detail::pgrad(self, 1) += g.colwise().sum().transpose().array();
    }
  });
}

// x: [B, C, H, W], b: [C].
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  if (x.shape().size() != 4 || x.dim(1) != b.size())
    throw ConfigError("add_channel_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = x.value();
  for (Index n = 0; n < B; ++n)
    for (Index ch = 0; ch < C; ++ch) out.data.segment((n * C + ch) * HW, HW) += b.value().data[ch];
  return detail::make_result<T>(std::move(out), {x, b}, [B, C, HW](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) {
      auto& gb = detail::pgrad(self, 1);
      for (Index n = 0; n < B; ++n)
        for (Index ch = 0; ch < C; ++ch) gb[ch] += self.grad.segment((n * C + ch) * HW, HW).sum();
    }
  });
}

// x: [B, ...], p: x.shape without the leading batch dim; p is added to every item.
template <typename T>
Var<T> add_broadcast_batch(const Var<T>& x, const Var<T>& p) {
  const Shape inner(x.shape().begin() + 1, x.shape().end());
  detail::check_same(inner, p.shape(), "add_broadcast_batch");
  const Index B = x.dim(0), M = p.size();
  Tensor<T> out = x.value();
  for (Index n = 0; n < B; ++n) out.data.segment(n * M, M) += p.value().data;
  return detail::make_result<T>(std::move(out), {x, p}, [B, M](Node<T>& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) {
      auto& gp = detail::pgrad(self, 1);
      for (Index n = 0; n < B; ++n) gp += self.grad.segment(n * M, M);
    }
  });
}

// s: [B, D] -> [B, N, D], copying each row N times.
template <typename T>
Var<T> expand_tokens(const Var<T>& s, Index tokens) {
  if (s.shape().size() != 2) throw ConfigError("expand_tokens: expected [B, D], got " + shape_str(s.shape()));
  const Index B = s.dim(0), D = s.dim(1);
  Tensor<T> out(Shape{B, tokens, D});
  for (Index n = 0; n < B; ++n)
    for (Index t = 0; t < tokens; ++t) out.data.segment((n * tokens + t) * D, D) = s.value().data.segment(n * D, D);
  return detail::make_result<T>(std::move(out), {s}, [B, D, tokens](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (Index n = 0; n < B; ++n)
      for (Index t = 0; t < tokens; ++t) g.segment(n * D, D) += self.grad.segment((n * tokens + t) * D, D);
  });
}

// ---------------------------------------------------------------- linear algebra

// x: [..., K], w: [K, N] -> [..., N].
template <typename T>
Var<T> matmul_last(const Var<T>& x, const Var<T>& w) {
  if (w.shape().size() != 2 || x.shape().empty() || x.shape().back() != w.dim(0))
    throw ConfigError("matmul_last: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const Index K = w.dim(0), N = w.dim(1), M = x.size() / K;
  Shape os = x.shape();
  os.back() = N;
  Tensor<T> out(os);
  out.as_matrix(M, N).noalias() = x.value().as_matrix(M, K) * w.value().as_matrix(K, N);
  return detail::make_result<T>(std::move(out), {x, w}, [M, K, N](Node<T>& self) {
    ConstMapRM<T> g(self.grad.data(), M, N);
    if (detail::wants(self, 0)) {
      MapRM<T> gx(detail::pgrad(self, 0).data(), M, K);
      gx.noalias() += g * self.parents[1]->value.as_matrix(K, N).transpose();
    }
    if (detail::wants(self, 1)) {
      MapRM<T> gw(detail::pgrad(self, 1).data(), K, N);
      gw.noalias() += self.parents[0]->value.as_matrix(M, K).transpose() * g;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul_last(x, w), b);
}

// Batched matmul: a [G, M, K] (or [G, K, M] if trans_a), b [G, K, N] (or [G, N, K] if trans_b).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0))
    throw ConfigError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index G = a.dim(0);
  const Index M = trans_a ? a.dim(2) : a.dim(1);
  const Index K = trans_a ? a.dim(1) : a.dim(2);
  const Index Kb = trans_b ? b.dim(2) : b.dim(1);
  const Index N = trans_b ? b.dim(1) : b.dim(2);
  if (K != Kb) throw ConfigError("bmm: inner dims " + std::to_string(K) + " vs " + std::to_string(Kb));
  const Index ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  Tensor<T> out(Shape{G, M, N});
  for (Index g = 0; g < G; ++g) {
    ConstMapRM<T> A(a.value().ptr() + g * ar * ac, ar, ac);
    ConstMapRM<T> Bm(b.value().ptr() + g * br * bc, br, bc);
    MapRM<T> C(out.ptr() + g * M * N, M, N);
    if (!trans_a && !trans_b) C.noalias() = A * Bm;
    else if (!trans_a && trans_b) C.noalias() = A * Bm.transpose();
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * Bm;
    else C.noalias() = A.transpose() * Bm.transpose();
  }
  return detail::make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    for (Index g = 0; g < G; ++g) {
      ConstMapRM<T> dC(self.grad.data() + g * M * N, M, N);
      ConstMapRM<T> A(self.parents[0]->value.ptr() + g * ar * ac, ar, ac);
      ConstMapRM<T> Bm(self.parents[1]->value.ptr() + g * br * bc, br, bc);
      if (detail::wants(self, 0)) {
        MapRM<T> dA(detail::pgrad(self, 0).data() + g * ar * ac, ar, ac);
        // d op(A) = dC op(B)^T
        if (!trans_a && !trans_b) dA.noalias() += dC * Bm.transpose();
        else if (!trans_a && trans_b) dA.noalias() += dC * Bm;
        else if (trans_a && !trans_b) dA.noalias() += Bm * dC.transpose();
        else dA.noalias() += Bm.transpose() * dC.transpose();
      }
      if (detail::wants(self, 1)) {
        MapRM<T> dB(detail::pgrad(self, 1).data() + g * br * bc, br, bc);
        // d op(B) = op(A)^T dC
        if (!trans_a && !trans_b) dB.noalias() += A.transpose() * dC;
        else if (!trans_a && trans_b) dB.noalias() += dC.transpose() * A;
        else if (trans_a && !trans_b) dB.noalias() += A * dC;
        else dB.noalias() += dC.transpose() * A.transpose();
      }
    }
  });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return detail::make_result<T>(std::move(out), {x}, [](Node<T>& self) { detail::pgrad(self, 0) += self.grad; });
}

namespace detail {

inline std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (Index i = static_cast<Index>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// For each output linear index, the source linear index under `perm`.
inline std::vector<Index> permute_map(const Shape& in, const std::vector<int>& perm) {
  const std::size_t nd = in.size();
  if (perm.size() != nd) throw ConfigError("permute: rank mismatch");
  const auto ist = strides_of(in);
  Shape os(nd);
  std::vector<Index> st(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    os[i] = in[perm[i]];
    st[i] = ist[perm[i]];
  }
  const Index total = numel(in);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> ctr(nd, 0);
  Index src = 0;
  for (Index o = 0; o < total; ++o) {
    map[o] = src;
    for (Index d = static_cast<Index>(nd) - 1; d >= 0; --d) {
      if (++ctr[d] < os[d]) {
        src += st[d];
        break;
      }
      src -= st[d] * (os[d] - 1);
      ctr[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  auto map = std::make_shared<std::vector<Index>>(detail::permute_map(x.shape(), perm));
  Shape os(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) os[i] = x.shape()[perm[i]];
  Tensor<T> out(os);
  const auto& src = x.value().data;
  for (Index o = 0; o < out.size(); ++o) out.data[o] = src[(*map)[o]];
  return detail::make_result<T>(std::move(out), {x}, [map](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (Index o = 0; o < self.grad.size(); ++o) g[(*map)[o]] += self.grad[o];
  });
}

// Contiguous slice [start, start + len) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, int axis, Index start, Index len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || start + len > s[axis])
    throw ConfigError("slice: out of range on " + shape_str(s));
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const Index full = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  for (Index o = 0; o < outer; ++o)
    out.data.segment(o * len * inner, len * inner) = x.value().data.segment((o * full + start) * inner, len * inner);
  return detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (Index o = 0; o < outer; ++o)
      g.segment((o * full + start) * inner, len * inner) += self.grad.segment(o * len * inner, len * inner);
  });
}

// x: [B, N, D] -> [B, D], mean over the token axis.
template <typename T>
Var<T> mean_tokens(const Var<T>& x) {
  if (x.shape().size() != 3) throw ConfigError("mean_tokens: expected [B, N, D], got " + shape_str(x.shape()));
  const Index B = x.dim(0), N = x.dim(1), D = x.dim(2);
  Tensor<T> out(Shape{B, D});
  for (Index n = 0; n < B; ++n) out.as_matrix(B, D).row(n) = x.value().as_matrix(B * N, D).middleRows(n * N, N).colwise().mean();
  return detail::make_result<T>(std::move(out), {x}, [B, N, D](Node<T>& self) {
    MapRM<T> g(detail::pgrad(self, 0).data(), B * N, D);
    ConstMapRM<T> go(self.grad.data(), B, D);
    for (Index n = 0; n < B; ++n) g.middleRows(n * N, N).rowwise() += go.row(n) / static_cast<T>(N);
  });
}

// Mean softmax cross-entropy of logits [B, C] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Index B = logits.dim(0), C = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B) throw ConfigError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<MatrixRM<T>>(B, C);
  T loss = 0;
  for (Index n = 0; n < B; ++n) {
    auto row = logits.value().as_matrix(B, C).row(n);
    const T mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    const T z = e.sum();
    probs->row(n) = e / z;
    loss += -(row(labels[n]) - mx - std::log(z));
  }
  Tensor<T> out(Shape{1});
  out.data[0] = loss / static_cast<T>(B);
  return detail::make_result<T>(std::move(out), {logits}, [probs, labels, B, C](Node<T>& self) {
    MapRM<T> g(detail::pgrad(self, 0).data(), B, C);
    const T s = self.grad[0] / static_cast<T>(B);
    for (Index n = 0; n < B; ++n) {
      g.row(n) += s * probs->row(n);
      g(n, labels[n]) -= s;
    }
  });
}

// ---------------------------------------------------------------- nn primitives

namespace detail {

template <typename T>
void im2col(const T* img, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho, Index Wo,
            MatrixRM<T>& col) {
  col.resize(C * k * k, Ho * Wo);
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((c * k + ky) * k + kx) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? img[(c * H + iy) * W + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const MatrixRM<T>& col, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho, Index Wo,
            T* img) {
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((c * k + ky) * k + kx) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

// x: [B, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, Index stride, Index pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3))
    throw ConfigError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Cout = w.dim(0), k = w.dim(2);
  const Index Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const Index Kc = Cin * k * k;
  Tensor<T> out(Shape{B, Cout, Ho, Wo});
  ConstMapRM<T> Wm(w.value().ptr(), Cout, Kc);
  MatrixRM<T> col;
  for (Index n = 0; n < B; ++n) {
    detail::im2col(x.value().ptr() + n * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col);
    MapRM<T> O(out.ptr() + n * Cout * Ho * Wo, Cout, Ho * Wo);
    O.noalias() = Wm * col;
    O.colwise() += b.value().data.matrix();
  }
  return detail::make_result<T>(std::move(out), {x, w, b}, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    ConstMapRM<T> Wm(self.parents[1]->value.ptr(), Cout, Kc);
    const bool gx = detail::wants(self, 0), gw = detail::wants(self, 1), gb = detail::wants(self, 2);
    MatrixRM<T> col, dcol;
    for (Index n = 0; n < B; ++n) {
      ConstMapRM<T> dO(self.grad.data() + n * Cout * Ho * Wo, Cout, Ho * Wo);
      if (gw) {
        detail::im2col(xv.ptr() + n * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col);
        MapRM<T> dW(detail::pgrad(self, 1).data(), Cout, Kc);
        dW.noalias() += dO * col.transpose();
      }
      if (gb) detail::pgrad(self, 2) += dO.rowwise().sum().array();
      if (gx) {
        dcol.noalias() = Wm.transpose() * dO;
        detail::col2im(dcol, Cin, H, W, k, stride, pad, Ho, Wo, detail::pgrad(self, 0).data() + n * Cin * H * W);
      }
    }
  });
}

// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  if (x.shape().size() != 4) throw ConfigError("upsample2x: expected NCHW");
  const Index BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (Index p = 0; p < BC; ++p)
    for (Index y = 0; y < 2 * H; ++y)
      for (Index xx = 0; xx < 2 * W; ++xx)
        out.data[(p * 2 * H + y) * 2 * W + xx] = x.value().data[(p * H + y / 2) * W + xx / 2];
  return detail::make_result<T>(std::move(out), {x}, [BC, H, W](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (Index p = 0; p < BC; ++p)
      for (Index y = 0; y < 2 * H; ++y)
        for (Index xx = 0; xx < 2 * W; ++xx) g[(p * H + y / 2) * W + xx / 2] += self.grad[(p * 2 * H + y) * 2 * W + xx];
  });
}

// Normalizes over the last dimension with affine gamma/beta of shape [D].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Index D = x.shape().back(), R = x.size() / D;
  if (gamma.size() != D || beta.size() != D) throw ConfigError("layer_norm: affine size mismatch");
  auto xhat = std::make_shared<ArrayX<T>>(x.size());
  auto rstd = std::make_shared<ArrayX<T>>(R);
  Tensor<T> out(x.shape());
  const auto& g = gamma.value().data;
  const auto& bt = beta.value().data;
  for (Index r = 0; r < R; ++r) {
    auto seg = x.value().data.segment(r * D, D);
    const T mu = seg.mean();
    const T var = (seg - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    xhat->segment(r * D, D) = (seg - mu) * rs;
    out.data.segment(r * D, D) = xhat->segment(r * D, D) * g + bt;
  }
  return detail::make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const auto& g = self.parents[1]->value.data;
    for (Index r = 0; r < R; ++r) {
      auto dy = self.grad.segment(r * D, D);
      auto xh = xhat->segment(r * D, D);
      if (detail::wants(self, 1)) detail::pgrad(self, 1) += dy * xh;
      if (detail::wants(self, 2)) detail::pgrad(self, 2) += dy;
      if (detail::wants(self, 0)) {
        ArrayX<T> dxh = dy * g;
        detail::pgrad(self, 0).segment(r * D, D) +=
            (*rstd)[r] * (dxh - dxh.mean() - xh * (dxh * xh).mean());
      }
    }
  });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const Index D = x.shape().back(), R = x.size() / D;
  Tensor<T> out(x.shape());
  for (Index r = 0; r < R; ++r) {
    auto seg = x.value().data.segment(r * D, D);
    ArrayX<T> e = (seg - seg.maxCoeff()).exp();
    out.data.segment(r * D, D) = e / e.sum();
  }
  return detail::make_result<T>(std::move(out), {x}, [R, D](Node<T>& self) {
    auto& gx = detail::pgrad(self, 0);
    for (Index r = 0; r < R; ++r) {
      auto y = self.value.data.segment(r * D, D);
      auto dy = self.grad.segment(r * D, D);
      gx.segment(r * D, D) += y * (dy - (dy * y).sum());
    }
  });
}

// Row lookup: table [V, D], ids of length B -> [B, D].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  const Index V = table.dim(0), D = table.dim(1);
  const Index B = static_cast<Index>(ids.size());
  Tensor<T> out(Shape{B, D});
  for (Index n = 0; n < B; ++n) {
    if (ids[n] < 0 || ids[n] >= V) throw ConfigError("embedding: id out of range");
    out.data.segment(n * D, D) = table.value().data.segment(ids[n] * D, D);
  }
  return detail::make_result<T>(std::move(out), {table}, [ids, D](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t n = 0; n < ids.size(); ++n)
      g.segment(ids[n] * D, D) += self.grad.segment(static_cast<Index>(n) * D, D);
  });
}

// Mean over patches of (1 - cos(pred[n], target[n])) for [B, N, D] inputs.
// Prediction norms are floored at `floor`; a zero-norm target patch is a data error.
template <typename T>
Var<T> cosine_alignment_loss(const Var<T>& pred, const Tensor<T>& target, T floor = T(1e-8)) {
  detail::check_same(pred.shape(), target.shape, "cosine_alignment_loss");
  const Index D = pred.shape().back(), R = pred.size() / D;
  auto cosv = std::make_shared<ArrayX<T>>(R);
  auto pn = std::make_shared<ArrayX<T>>(R);
  auto tn = std::make_shared<ArrayX<T>>(R);
  T acc = 0;
  for (Index r = 0; r < R; ++r) {
    auto p = pred.value().data.segment(r * D, D);
    auto t = target.data.segment(r * D, D);
    const T tnorm = std::sqrt(t.square().sum());
    if (!(tnorm > T(0))) throw DataError("cosine_alignment_loss: zero-norm target patch at row " + std::to_string(r));
    const T pnorm = std::max(std::sqrt(p.square().sum()), floor);
    (*pn)[r] = pnorm;
    (*tn)[r] = tnorm;
    (*cosv)[r] = (p * t).sum() / (pnorm * tnorm);
    acc += T(1) - (*cosv)[r];
  }
  Tensor<T> out(Shape{1});
  out.data[0] = acc / static_cast<T>(R);
  return detail::make_result<T>(std::move(out), {pred}, [=, target = target](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    const T s = -self.grad[0] / static_cast<T>(R);
    const T fl = floor;
    for (Index r = 0; r < R; ++r) {
      auto p = self.parents[0]->value.data.segment(r * D, D);
      auto t = target.data.segment(r * D, D);
      const T a = (*pn)[r], b = (*tn)[r];
      const bool floored = std::sqrt(p.square().sum()) <= fl;
      if (floored)
        g.segment(r * D, D) += s * t / (a * b);
      else
        g.segment(r * D, D) += s * (t / (a * b) - (*cosv)[r] * p / (a * a));
    }
  });
}

}  // namespace sendvae::ad
