#pragma once

// Small neural-network building blocks on top of the autograd tensor.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "epiptrack/autograd.hpp"

namespace epiptrack::nn {

using ag::Shape;
using ag::Tensor;

using Rng = std::mt19937_64;

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor const_param(Shape shape, double value) {
  return Tensor::parameter(shape, std::vector<double>(ag::numel(shape), value));
}

/// y = x W + b with W stored as [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when constructed without bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param({in, out}, bound, rng);
    if (with_bias) bias = uniform_param({out}, bound, rng);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const {
    Tensor y = ag::matmul(x, weight);
    return bias.defined() ? ag::add(y, bias) : y;
  }

  void set_identity() {
    auto w = weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < std::min(in_features(), out_features()); ++i)
      w[i * out_features() + i] = 1.0;
    zero_bias();
  }
  void set_zero() {
    auto w = weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    zero_bias();
  }
  void zero_bias() {
    if (!bias.defined()) return;
    auto b = bias.mutable_data();
    std::fill(b.begin(), b.end(), 0.0);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(const_param({d}, 1.0)), bias(const_param({d}, 0.0)) {}

  Tensor operator()(const Tensor& x) const {
    return ag::add(ag::mul(ag::layer_norm_lastdim(x, eps), gain), bias);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Splits [B, L, h*dh] into [B*h, L, dh].
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2), dh = d / heads;
  return ag::reshape(ag::permute(ag::reshape(x, {B, L, heads, dh}), {0, 2, 1, 3}),
                     {B * heads, L, dh});
}

inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t Bh = x.dim(0), L = x.dim(1), dh = x.dim(2), B = Bh / heads;
  return ag::reshape(ag::permute(ag::reshape(x, {B, heads, L, dh}), {0, 2, 1, 3}),
                     {B, L, heads * dh});
}

/// Multi-head attention. Each batch row attends only within itself.
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t n_heads, Rng& rng)
      : q_proj(d, d, rng), k_proj(d, d, rng), v_proj(d, d, rng), out_proj(d, d, rng), heads(n_heads) {
    if (n_heads == 0 || d % n_heads != 0)
      throw std::invalid_argument("MultiHeadAttention: heads must divide the model width");
  }

  /// query [B, n, d], key/value [B, l, d]; `additive_mask` is [n, l] or
  /// empty. When `weights` is non-null it receives the [B*h, n, l]
  /// attention probabilities.
  Tensor operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                    const Tensor* additive_mask = nullptr, Tensor* weights = nullptr) const {
    const std::size_t d = query.dim(2);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));
    Tensor q = split_heads(q_proj(query), heads);
    Tensor k = split_heads(k_proj(key), heads);
    Tensor v = split_heads(v_proj(value), heads);
    Tensor scores = ag::scale(ag::bmm(q, k, true), inv_sqrt);
    if (additive_mask) scores = ag::add(scores, *additive_mask);
    Tensor probs = ag::softmax_lastdim(scores);
    if (weights) *weights = probs;
    return out_proj(merge_heads(ag::bmm(probs, v), heads));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    q_proj.collect(out, prefix + ".q");
    k_proj.collect(out, prefix + ".k");
    v_proj.collect(out, prefix + ".v");
    out_proj.collect(out, prefix + ".out");
  }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, std::size_t hidden, Rng& rng)
      : ln1(d), ln2(d), attn(d, heads, rng), fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Tensor operator()(const Tensor& x, const Tensor* mask = nullptr) const {
    Tensor h = ln1(x);
    Tensor y = ag::add(x, attn(h, h, h, mask));
    return ag::add(y, fc2(ag::relu(fc1(ln2(y)))));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".ln1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".ln2");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

/// Causal additive mask: position i attends to j <= i.
inline Tensor causal_mask(std::size_t len) {
  std::vector<double> m(len * len, 0.0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = -1e9;
  return Tensor::constant({len, len}, std::move(m));
}

}  // namespace epiptrack::nn
