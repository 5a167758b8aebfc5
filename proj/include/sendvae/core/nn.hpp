#pragma once

// Named parameter storage and the layer building blocks shared by the VAE,
// mapper, learned teacher and flow transformer.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sendvae/core/autograd.hpp"
#include "sendvae/core/rng.hpp"

namespace sendvae {

template <typename T>
class ParamStore {
 public:
  ad::Var<T>& add(const std::string& name, Tensor<T> init) {
    if (params_.count(name)) throw ConfigError("duplicate parameter " + name);
    order_.push_back(name);
    return params_.emplace(name, ad::Var<T>(std::move(init), true)).first->second;
  }

  const ad::Var<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  ad::Var<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  const std::vector<std::string>& names() const { return order_; }

  Index count() const {
    Index n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.node->zero_grad();
  }

  // Stops gradient recording into every parameter and drops stale gradients.
  void freeze() {
    for (auto& [_, v] : params_) {
      v.node->requires_grad = false;
      v.node->zero_grad();
    }
  }
  bool frozen() const {
    for (const auto& [_, v] : params_)
      if (v.node->requires_grad) return false;
    return true;
  }

  // FNV-1a over parameter names and raw bytes, in insertion order.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
    };
    for (const auto& name : order_) {
      mix(name.data(), name.size());
      const auto& t = params_.at(name).value();
      mix(t.ptr(), static_cast<std::size_t>(t.size()) * sizeof(T));
    }
    return h;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& name : order_) {
      auto& v = out.add(name, params_.at(name).value().template cast<U>());
      v.node->requires_grad = params_.at(name).node->requires_grad;
    }
    return out;
  }

  // Copies values of every parameter whose name starts with `prefix` from `other`.
  void copy_from(const ParamStore& other, const std::string& prefix = "") {
    for (const auto& name : order_) {
      if (name.rfind(prefix, 0) != 0) continue;
      const auto& src = other.get(name).value();
      auto& dst = params_.at(name).mutable_value();
      if (src.shape != dst.shape) throw ConfigError("copy_from: shape mismatch for " + name);
      dst.data = src.data;
    }
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, ad::Var<T>> params_;
};

namespace nn {

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(stddev * rng.normal());
  return t;
}

// Weight stored as [in, out] so forward is x * W. `gain` scales the Xavier bound.
template <typename T>
void add_linear(ParamStore<T>& ps, const std::string& name, Index in, Index out, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  ps.add(name + ".w", uniform_init<T>({in, out}, bound, rng));
  ps.add(name + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
ad::Var<T> linear(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x) {
  return ad::linear(x, ps.get(name + ".w"), ps.get(name + ".b"));
}

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, Index cin, Index cout, Index k, Rng& rng,
              double gain = 1.0) {
  const double fan_in = static_cast<double>(cin * k * k);
  const double bound = gain * std::sqrt(3.0 / fan_in);
  ps.add(name + ".w", uniform_init<T>({cout, cin, k, k}, bound, rng));
  ps.add(name + ".b", Tensor<T>::zeros({cout}));
}

template <typename T>
ad::Var<T> conv(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x, Index stride = 1) {
  const auto& w = ps.get(name + ".w");
  return ad::conv2d(x, w, ps.get(name + ".b"), stride, w.dim(2) / 2);
}

template <typename T>
void add_layer_norm(ParamStore<T>& ps, const std::string& name, Index dim) {
  ps.add(name + ".g", Tensor<T>::constant({dim}, T(1)));
  ps.add(name + ".b", Tensor<T>::zeros({dim}));
}

template <typename T>
ad::Var<T> layer_norm(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x) {
  return ad::layer_norm(x, ps.get(name + ".g"), ps.get(name + ".b"));
}

// Multi-head self-attention parameters: fused qkv projection and output projection.
template <typename T>
void add_attention(ParamStore<T>& ps, const std::string& name, Index dim, Rng& rng) {
  add_linear(ps, name + ".qkv", dim, 3 * dim, rng);
  add_linear(ps, name + ".proj", dim, dim, rng);
}

// x: [B, N, D] -> [B, N, D].
template <typename T>
ad::Var<T> attention(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x, Index heads) {
  const Index B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (D % heads != 0) throw ConfigError("attention: heads must divide width");
  const Index dh = D / heads;
  auto qkv = linear(ps, name + ".qkv", x);                              // [B, N, 3D]
  qkv = ad::permute(ad::reshape(qkv, {B, N, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3, B, H, N, dh]
  auto q = ad::reshape(ad::slice(qkv, 0, 0, 1), {B * heads, N, dh});
  auto k = ad::reshape(ad::slice(qkv, 0, 1, 1), {B * heads, N, dh});
  auto v = ad::reshape(ad::slice(qkv, 0, 2, 1), {B * heads, N, dh});
  auto scores = ad::scale(ad::bmm(q, k, false, true), T(1) / std::sqrt(static_cast<T>(dh)));
  auto attn = ad::softmax_last(scores);
  auto out = ad::bmm(attn, v);                                           // [B*H, N, dh]
  out = ad::reshape(ad::permute(ad::reshape(out, {B, heads, N, dh}), {0, 2, 1, 3}), {B, N, D});
  return linear(ps, name + ".proj", out);
}

template <typename T>
void add_mlp(ParamStore<T>& ps, const std::string& name, Index dim, Index hidden, Rng& rng) {
  add_linear(ps, name + ".fc1", dim, hidden, rng);
  add_linear(ps, name + ".fc2", hidden, dim, rng);
}

template <typename T>
ad::Var<T> mlp(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x) {
  return linear(ps, name + ".fc2", ad::gelu(linear(ps, name + ".fc1", x)));
}

// Pre-norm transformer encoder layer (LN -> MHA -> residual, LN -> GELU MLP -> residual).
template <typename T>
void add_encoder_layer(ParamStore<T>& ps, const std::string& name, Index dim, Index mlp_ratio, Rng& rng) {
  add_layer_norm(ps, name + ".ln1", dim);
  add_attention(ps, name + ".attn", dim, rng);
  add_layer_norm(ps, name + ".ln2", dim);
  add_mlp(ps, name + ".mlp", dim, dim * mlp_ratio, rng);
}

template <typename T>
ad::Var<T> encoder_layer(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x, Index heads) {
  auto h = ad::add(x, attention(ps, name + ".attn", layer_norm(ps, name + ".ln1", x), heads));
  return ad::add(h, mlp(ps, name + ".mlp", layer_norm(ps, name + ".ln2", h)));
}

// [B, C, H, W] -> [B, (H/p)(W/p), C*p*p], tokens row-major from the top-left.
template <typename T>
ad::Var<T> patchify(const ad::Var<T>& x, Index p) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % p != 0 || W % p != 0) throw ConfigError("patchify: patch size must divide the grid");
  auto y = ad::permute(ad::reshape(x, {B, C, H / p, p, W / p, p}), {0, 2, 4, 1, 3, 5});
  return ad::reshape(y, {B, (H / p) * (W / p), C * p * p});
}

// Inverse of patchify.
template <typename T>
ad::Var<T> unpatchify(const ad::Var<T>& tokens, Index C, Index H, Index W, Index p) {
  const Index B = tokens.dim(0);
  auto y = ad::permute(ad::reshape(tokens, {B, H / p, W / p, C, p, p}), {0, 3, 1, 4, 2, 5});
  return ad::reshape(y, {B, C, H, W});
}

}  // namespace nn

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

// Decoupled weight decay applies to tensors of rank >= 2 only.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  // Returns the pre-clip global gradient norm.
  double step(ParamStore<T>& ps) {
    double sq = 0;
    for (const auto& name : ps.names()) {
      const auto& g = ps.get(name).grad();
      if (g.size()) sq += g.template cast<double>().square().sum();
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& name : ps.names()) {
      auto& p = ps.get(name);
      if (!p.node->requires_grad || p.grad().size() == 0) continue;
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m = ArrayX<T>::Zero(p.size());
        st.v = ArrayX<T>::Zero(p.size());
      }
      ArrayX<T> g = p.grad() * static_cast<T>(clip);
      st.m = T(cfg_.beta1) * st.m + T(1 - cfg_.beta1) * g;
      st.v = T(cfg_.beta2) * st.v + T(1 - cfg_.beta2) * g.square();
      auto& val = p.mutable_value().data;
      if (cfg_.weight_decay > 0 && p.shape().size() >= 2) val *= T(1 - cfg_.lr * cfg_.weight_decay);
      val -= T(cfg_.lr) * (st.m / T(bc1)) / ((st.v / T(bc2)).sqrt() + T(cfg_.eps));
    }
    return norm;
  }

  struct Moments {
    ArrayX<T> m, v;
  };
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace sendvae
