#pragma once

// Training objectives between multimodal (M) and visual (V) embeddings:
// supervised contrastive, bidirectional hard triplet and similarity
// distribution matching. Inputs are normalized internally.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "epiptrack/autograd.hpp"

namespace epiptrack {

using ag::Tensor;

struct LossTerms {
  bool con = true;
  bool tri = true;
  bool sim = true;
};

struct LossConfig {
  double tau = 0.07;
  double margin = 0.3;
  double eps = 1e-8;
  LossTerms terms;
  bool include_self_positive = true;  // Pos(i) contains i
  bool exclude_no_positive = true;    // otherwise a sample with no positive is an error

  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("loss config: tau must be positive");
    if (margin < 0.0) throw std::invalid_argument("loss config: margin must be non-negative");
    if (!(eps > 0.0)) throw std::invalid_argument("loss config: eps must be positive");
  }
};

namespace detail {

inline void check_pair(const Tensor& m, const Tensor& v, const std::vector<int>& ids, const char* what) {
  if (m.rank() != 2 || v.rank() != 2 || m.shape() != v.shape())
    throw std::invalid_argument(std::string(what) + ": M and V must both be [N, d]");
  if (ids.size() != m.dim(0)) throw std::invalid_argument(std::string(what) + ": label count mismatch");
  if (m.dim(0) < 2) throw std::invalid_argument(std::string(what) + ": need N >= 2");
}

/// m_i . v_j for normalized rows, [N, N].
inline Tensor cosine_matrix(const Tensor& m, const Tensor& v) {
  return ag::matmul(ag::l2_normalize_lastdim(m), ag::permute(ag::l2_normalize_lastdim(v), {1, 0}));
}

}  // namespace detail

inline Tensor contrastive_loss(const Tensor& m, const Tensor& v, const std::vector<int>& ids,
                               const LossConfig& cfg = {}) {
  detail::check_pair(m, v, ids, "contrastive_loss");
  const std::size_t n = ids.size();
  Tensor s = ag::scale(detail::cosine_matrix(m, v), 1.0 / cfg.tau);
  std::vector<double> pos_mask(n * n, -1e9);
  std::vector<double> keep(n, 0.0);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (ids[i] == ids[j] && (cfg.include_self_positive || i != j)) {
        pos_mask[i * n + j] = 0.0;
        any = true;
      }
    if (!any) {
      if (!cfg.exclude_no_positive)
        throw std::invalid_argument("contrastive_loss: sample " + std::to_string(i) + " has no positive");
      continue;
    }
    keep[i] = 1.0;
    ++kept;
  }
  if (kept == 0) return Tensor::scalar(0.0);
  Tensor lse_all = ag::logsumexp_lastdim(s);
  Tensor lse_pos = ag::logsumexp_lastdim(ag::add(s, Tensor::constant({n, n}, std::move(pos_mask))));
  Tensor per = ag::mul(ag::sub(lse_all, lse_pos), Tensor::constant({n}, std::move(keep)));
  return ag::scale(ag::sum(per), 1.0 / static_cast<double>(kept));
}

namespace detail {

/// Hinge on hardest positive / hardest negative per row of a distance matrix.
inline Tensor triplet_direction(const Tensor& dist, const std::vector<int>& ids, double margin,
                                bool include_self) {
  const std::size_t n = ids.size();
  const auto dv = dist.data();
  ag::Index pos_idx(n, -1), neg_idx(n, -1);
  std::vector<double> active(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    long hp = -1, hn = -1;
    for (std::size_t j = 0; j < n; ++j) {
      const long flat = static_cast<long>(i * n + j);
      if (ids[i] == ids[j]) {
        if (!include_self && i == j) continue;
        if (hp < 0 || dv[flat] > dv[hp]) hp = flat;
      } else if (hn < 0 || dv[flat] < dv[hn]) {
        hn = flat;
      }
    }
    if (hp >= 0 && hn >= 0) {
      pos_idx[i] = hp;
      neg_idx[i] = hn;
      active[i] = 1.0;
    }
  }
  Tensor dp = ag::gather(dist, std::move(pos_idx), {n});
  Tensor dn = ag::gather(dist, std::move(neg_idx), {n});
  Tensor hinge = ag::relu(ag::add_scalar(ag::sub(dp, dn), margin));
  return ag::sum(ag::mul(hinge, Tensor::constant({n}, std::move(active))));
}

}  // namespace detail

inline Tensor triplet_loss(const Tensor& m, const Tensor& v, const std::vector<int>& ids,
                           const LossConfig& cfg = {}) {
  detail::check_pair(m, v, ids, "triplet_loss");
  const std::size_t n = ids.size();
  Tensor d = ag::add_scalar(ag::scale(detail::cosine_matrix(m, v), -1.0), 1.0);
  Tensor m2v = detail::triplet_direction(d, ids, cfg.margin, cfg.include_self_positive);
  Tensor v2m = detail::triplet_direction(ag::permute(d, {1, 0}), ids, cfg.margin, cfg.include_self_positive);
  return ag::scale(ag::add(m2v, v2m), 1.0 / (2.0 * static_cast<double>(n)));
}

/// Row-normalized identity-equality matrix.
inline std::vector<double> target_distribution(const std::vector<int>& ids) {
  const std::size_t n = ids.size();
  std::vector<double> p(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double cnt = 0.0;
    for (std::size_t j = 0; j < n; ++j) cnt += ids[i] == ids[j];
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] = ids[i] == ids[j] ? 1.0 / cnt : 0.0;
  }
  return p;
}

inline Tensor similarity_distribution_loss(const Tensor& m, const Tensor& v, const std::vector<int>& ids,
                                           const LossConfig& cfg = {}) {
  detail::check_pair(m, v, ids, "similarity_distribution_loss");
  const std::size_t n = ids.size();
  std::vector<double> log_p = target_distribution(ids);
  for (auto& x : log_p) x = std::log(x + cfg.eps);
  Tensor log_target = Tensor::constant({n, n}, std::move(log_p));
  Tensor s = ag::scale(detail::cosine_matrix(m, v), 1.0 / cfg.tau);  // s[i,j] = m_i . v_j / tau
  auto kl_rows = [&](const Tensor& logits) {
    Tensor log_q = ag::log_softmax_lastdim(logits);
    return ag::sum(ag::mul(ag::exp(log_q), ag::sub(log_q, log_target)));
  };
  Tensor m2v = kl_rows(s);
  Tensor v2m = kl_rows(ag::permute(s, {1, 0}));
  return ag::scale(ag::add(m2v, v2m), 1.0 / static_cast<double>(n));
}

struct LossBreakdown {
  Tensor total;
  double con = 0.0, tri = 0.0, sim = 0.0;
};

/// Each enabled term is the mean over the explicit and implicit branches.
inline LossBreakdown total_loss(const Tensor& m_ev, const Tensor& m_iv, const Tensor& v,
                                const std::vector<int>& ids, const LossConfig& cfg = {}) {
  cfg.validate();
  LossBreakdown out;
  std::vector<Tensor> parts;
  auto branch_mean = [&](auto fn) {
    return ag::scale(ag::add(fn(m_ev, v, ids, cfg), fn(m_iv, v, ids, cfg)), 0.5);
  };
  if (cfg.terms.con) {
    Tensor t = branch_mean([](auto&&... a) { return contrastive_loss(a...); });
    out.con = t.item();
    parts.push_back(t);
  }
  if (cfg.terms.tri) {
    Tensor t = branch_mean([](auto&&... a) { return triplet_loss(a...); });
    out.tri = t.item();
    parts.push_back(t);
  }
  if (cfg.terms.sim) {
    Tensor t = branch_mean([](auto&&... a) { return similarity_distribution_loss(a...); });
    out.sim = t.item();
    parts.push_back(t);
  }
  if (parts.empty()) throw std::invalid_argument("total_loss: no loss term enabled");
  out.total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = ag::add(out.total, parts[i]);
  return out;
}

}  // namespace epiptrack
