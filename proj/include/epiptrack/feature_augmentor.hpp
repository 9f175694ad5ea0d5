#pragma once

// Visual feature augmentation: channel-conv refiner, residual VF adapter and
// Top-K dissimilar-sample aggregation producing E_dv.

#include <algorithm>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "epiptrack/autograd.hpp"
#include "epiptrack/nn.hpp"

namespace epiptrack {

using ag::Tensor;

/// Zero-padded kernel-3 windows over the channel axis of a [r, d, c] input:
/// out[r, j, t*c + ch] = in[r, j + t - 1, ch].
inline Tensor channel_windows(const Tensor& in, std::size_t rows, std::size_t d, std::size_t c) {
  ag::Index idx(rows * d * 3 * c);
  std::size_t o = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const long src = static_cast<long>(j + t) - 1;
          idx[o++] = (src < 0 || src >= static_cast<long>(d)) ? -1
                                                                : static_cast<long>((r * d + src) * c + ch);
        }
  return ag::gather(in, std::move(idx), {rows, d, 3 * c});
}

struct RefinerOutputs {
  Tensor tokens;  // [b, l, d]
  Tensor pooled;  // [b, d]
};

/// Two 1-D convolutions across channels (1 -> 4 -> 1, kernel 3, ReLU
/// between) followed by a residual d -> d/4 -> d bottleneck.
struct RefinerStack {
  static constexpr std::size_t kHidden = 4;
  Tensor conv1_w;  // [3, 4]
  Tensor conv1_b;  // [4]
  Tensor conv2_w;  // [12, 1], row t*4 + ch
  Tensor conv2_b;  // [1]
  nn::Linear down, up;

  RefinerStack() = default;
  RefinerStack(std::size_t d, nn::Rng& rng)
      : down(d, std::max<std::size_t>(1, d / 4), rng), up(std::max<std::size_t>(1, d / 4), d, rng) {
    conv1_w = nn::normal_param({3, kHidden}, 0.05, rng);
    conv1_b = nn::const_param({kHidden}, 0.0);
    conv2_w = nn::normal_param({3 * kHidden, 1}, 0.05, rng);
    conv2_b = nn::const_param({1}, 0.0);
    // start near the identity so untrained tokens pass through
    conv1_w.mutable_data()[1 * kHidden + 0] += 1.0;
    conv1_w.mutable_data()[1 * kHidden + 1] -= 1.0;
    conv2_w.mutable_data()[1 * kHidden + 0] += 1.0;
    conv2_w.mutable_data()[1 * kHidden + 1] -= 1.0;
  }

  /// Exact identity: delta kernels routing x through relu(x) - relu(-x), and
  /// a zeroed bottleneck.
  void set_identity() {
    auto w1 = conv1_w.mutable_data();
    auto w2 = conv2_w.mutable_data();
    std::fill(w1.begin(), w1.end(), 0.0);
    std::fill(w2.begin(), w2.end(), 0.0);
    w1[1 * kHidden + 0] = 1.0;
    w1[1 * kHidden + 1] = -1.0;
    w2[1 * kHidden + 0] = 1.0;
    w2[1 * kHidden + 1] = -1.0;
    std::fill(conv1_b.mutable_data().begin(), conv1_b.mutable_data().end(), 0.0);
    conv2_b.mutable_data()[0] = 0.0;
    up.set_zero();
  }

  Tensor refine_rows(const Tensor& x) const {
    const std::size_t rows = x.dim(0), d = x.dim(1);
    Tensor h = ag::relu(ag::add(ag::matmul(channel_windows(x, rows, d, 1), conv1_w), conv1_b));
    Tensor c = ag::reshape(ag::add(ag::matmul(channel_windows(h, rows, d, kHidden), conv2_w), conv2_b), {rows, d});
    return ag::add(c, up(ag::relu(down(c))));
  }

  RefinerOutputs operator()(const Tensor& ev) const {
    if (ev.rank() != 3) throw std::invalid_argument("refine: expected [b, l, d]");
    const std::size_t b = ev.dim(0), l = ev.dim(1), d = ev.dim(2);
    RefinerOutputs out;
    out.tokens = ag::reshape(refine_rows(ag::reshape(ev, {b * l, d})), {b, l, d});
    out.pooled = ag::mean_axis(out.tokens, 1);
    return out;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".conv1.weight", conv1_w});
    out.push_back({prefix + ".conv1.bias", conv1_b});
    out.push_back({prefix + ".conv2.weight", conv2_w});
    out.push_back({prefix + ".conv2.bias", conv2_b});
    down.collect(out, prefix + ".down");
    up.collect(out, prefix + ".up");
  }
};

/// E + LN(ReLU(W E)); the normalization has no affine part so LN(0) = 0.
struct VFAdapter {
  nn::Linear w;

  VFAdapter() = default;
  VFAdapter(std::size_t d, nn::Rng& rng) : w(d, d, rng) {}

  Tensor operator()(const Tensor& e) const { return ag::add(e, ag::layer_norm_lastdim(ag::relu(w(e)))); }

  void collect(nn::ParamList& out, const std::string& prefix) const { w.collect(out, prefix + ".w"); }
};

/// 1 - cos(E_i, E_j) with a zeroed diagonal.
inline Tensor dis_score(const Tensor& e) {
  if (e.rank() != 2) throw std::invalid_argument("dis_score: expected [b, d]");
  const std::size_t b = e.dim(0);
  Tensor n = ag::l2_normalize_lastdim(e, 1e-12);
  Tensor cos = ag::matmul(n, ag::permute(n, {1, 0}));
  std::vector<double> off(b * b, 1.0);
  for (std::size_t i = 0; i < b; ++i) off[i * b + i] = 0.0;
  Tensor mask = Tensor::constant({b, b}, std::move(off));
  return ag::mul(ag::add_scalar(ag::scale(cos, -1.0), 1.0), mask);
}

struct TopKSelection {
  std::size_t k = 0;                          // K' actually used
  std::vector<std::vector<std::size_t>> idx;  // [b][k]
  Tensor scores;                              // [b, k], undefined when k == 0
  Tensor samples;                             // [b, k, d], undefined when k == 0
};

/// Indices of the `k` largest entries of row i excluding i; ties go to the
/// lower index.
inline std::vector<std::size_t> top_k_row(std::span<const double> row, std::size_t i, std::size_t k) {
  std::vector<std::size_t> cand;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != i) cand.push_back(j);
  k = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  cand.resize(k);
  return cand;
}

inline TopKSelection top_k_select(const Tensor& dis, const Tensor& e, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top_k_select: K must be at least 1");
  const std::size_t b = e.dim(0), d = e.dim(1);
  if (dis.rank() != 2 || dis.dim(0) != b || dis.dim(1) != b)
    throw std::invalid_argument("top_k_select: score matrix must be [b, b]");
  TopKSelection sel;
  sel.k = std::min(k, b - 1);
  if (sel.k == 0) {
    sel.idx.assign(b, {});
    return sel;
  }
  const auto dv = dis.data();
  ag::Index score_idx, sample_idx;
  for (std::size_t i = 0; i < b; ++i) {
    sel.idx.push_back(top_k_row(dv.subspan(i * b, b), i, sel.k));
    for (std::size_t j : sel.idx.back()) {
      score_idx.push_back(static_cast<long>(i * b + j));
      for (std::size_t c = 0; c < d; ++c) sample_idx.push_back(static_cast<long>(j * d + c));
    }
  }
  sel.scores = ag::gather(dis, std::move(score_idx), {b, sel.k});
  sel.samples = ag::gather(e, std::move(sample_idx), {b, sel.k, d});
  return sel;
}

/// Channel-scaled, score-weighted contrast plus a residual fusion with Ê.
struct TopKAggregator {
  std::size_t k = 5;
  double alpha = 0.2;
  Tensor w_dim;  // [d], starts at 1
  nn::Linear out;  // 2d -> d

  TopKAggregator() = default;
  TopKAggregator(std::size_t d, std::size_t k_, double alpha_, nn::Rng& rng)
      : k(k_), alpha(alpha_), w_dim(nn::const_param({d}, 1.0)), out(2 * d, d, rng) {
    if (k == 0) throw std::invalid_argument("augmentor: K must be at least 1");
  }

  Tensor difference(const TopKSelection& sel, std::size_t b, std::size_t d) const {
    if (sel.k == 0) return Tensor::zeros({b, d});
    Tensor w = ag::softmax_lastdim(sel.scores);
    Tensor pooled = ag::reshape(ag::bmm(ag::reshape(w, {b, 1, sel.k}), sel.samples), {b, d});
    return ag::mul(pooled, w_dim);
  }

  Tensor aggregate(const TopKSelection& sel, const Tensor& e) const {
    const std::size_t b = e.dim(0), d = e.dim(1);
    Tensor diff = difference(sel, b, d);
    return ag::add(ag::scale(out(ag::concat({diff, e}, 1)), alpha), e);
  }

  Tensor operator()(const Tensor& e) const { return aggregate(top_k_select(dis_score(e), e, k), e); }

  void collect(nn::ParamList& o, const std::string& prefix) const {
    o.push_back({prefix + ".w_dim", w_dim});
    out.collect(o, prefix + ".out");
  }
};

struct AugmentorOutputs {
  Tensor tokens;    // E_rv tokens [b, l, d]
  Tensor pooled;    // E_rv pooled [b, d]
  Tensor adapted;   // Ê_rv [b, d]
  Tensor embedding; // E_dv [b, d]
};

struct FeatureAugmentor {
  RefinerStack refiner;
  VFAdapter adapter;
  TopKAggregator aggregator;

  FeatureAugmentor() = default;
  FeatureAugmentor(std::size_t d, std::size_t k, double alpha, nn::Rng& rng)
      : refiner(d, rng), adapter(d, rng), aggregator(d, k, alpha, rng) {}

  AugmentorOutputs operator()(const Tensor& visual_tokens) const {
    AugmentorOutputs o;
    auto r = refiner(visual_tokens);
    o.tokens = r.tokens;
    o.pooled = r.pooled;
    o.adapted = adapter(r.pooled);
    o.embedding = aggregator(o.adapted);
    return o;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    refiner.collect(out, prefix + ".refiner");
    adapter.collect(out, prefix + ".vf_adapter");
    aggregator.collect(out, prefix + ".topk");
  }
};

}  // namespace epiptrack
