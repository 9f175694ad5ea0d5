#pragma once

// Threshold-wise similarity metrics, cross-modal consistency, and MOT
// scoring (IDF1, MOTA, fragments) with report emission.

#include <algorithm>
#include <array>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "epiptrack/association.hpp"
#include "epiptrack/autograd.hpp"
#include "epiptrack/datamodel.hpp"
#include "epiptrack/hungarian.hpp"

namespace epiptrack {

inline constexpr std::array<double, 4> kThresholds{0.5, 0.6, 0.7, 0.8};

struct ThresholdMetrics {
  double thr = 0.0;
  long tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool undefined = false;  // some denominator was empty and the metric set to 0
};

inline ThresholdMetrics threshold_metrics(const std::vector<double>& matched, const std::vector<double>& unmatched,
                                          double thr) {
  ThresholdMetrics m;
  m.thr = thr;
  for (double s : matched) (s > thr ? m.tp : m.fn)++;
  for (double s : unmatched) m.fp += s > thr;
  if (m.tp + m.fp > 0) m.precision = double(m.tp) / double(m.tp + m.fp);
  else m.undefined = true;
  if (m.tp + m.fn > 0) m.recall = double(m.tp) / double(m.tp + m.fn);
  else m.undefined = true;
  if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  else m.undefined = true;
  return m;
}

struct PairSimilarities {
  std::vector<double> matched;
  std::vector<double> unmatched;
};

/// Rows as plain vectors.
inline std::vector<std::vector<double>> rows_of(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("expected a [N, d] matrix");
  std::vector<std::vector<double>> out(t.dim(0));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    out[i].assign(t.data().begin() + i * t.dim(1), t.data().begin() + (i + 1) * t.dim(1));
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  return ab / ((std::sqrt(aa) + 1e-12) * (std::sqrt(bb) + 1e-12));
}

/// Same-instance cosines and cross-identity cosines.
inline PairSimilarities pair_protocol(const std::vector<std::vector<double>>& m,
                                      const std::vector<std::vector<double>>& v, const std::vector<int>& ids) {
  if (m.size() != v.size() || m.size() != ids.size())
    throw std::invalid_argument("pair_protocol: size mismatch");
  if (m.size() < 2) throw std::invalid_argument("pair_protocol: need N >= 2");
  PairSimilarities p;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (i == j) p.matched.push_back(cosine(m[i], v[j]));
      else if (ids[i] != ids[j]) p.unmatched.push_back(cosine(m[i], v[j]));
    }
  return p;
}

struct ConsistencyReport {
  double modality_gap = 0.0;
  double alignment = 0.0;
};

inline ConsistencyReport consistency_metrics(const std::vector<std::vector<double>>& m,
                                             const std::vector<std::vector<double>>& v) {
  if (m.size() != v.size() || m.empty()) throw std::invalid_argument("consistency_metrics: need equal non-empty sets");
  const std::size_t n = m.size(), d = m[0].size();
  std::vector<double> mm(d, 0.0), mv(d, 0.0);
  ConsistencyReport r;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      mm[k] += m[i][k] / double(n);
      mv[k] += v[i][k] / double(n);
      r.alignment += (m[i][k] - v[i][k]) * (m[i][k] - v[i][k]) / double(n);
    }
  for (std::size_t k = 0; k < d; ++k) r.modality_gap += (mm[k] - mv[k]) * (mm[k] - mv[k]);
  return r;
}

/// Per-threshold metrics averaged over the explicit and implicit branches,
/// plus consistency of each branch with the visual embeddings.
struct SimilarityReport {
  std::array<ThresholdMetrics, 4> per_threshold;  // branch-averaged P/R/F1; counts summed
  ConsistencyReport consistency;                  // branch-averaged
  double mean_positive_cosine = 0.0;              // branch-averaged mean matched cosine
  double positive_cosine_explicit = 0.0;
  double positive_cosine_implicit = 0.0;
};

inline SimilarityReport similarity_report(const Tensor& m_ev, const Tensor& m_iv, const Tensor& v,
                                          const std::vector<int>& ids, bool normalize_consistency = true) {
  SimilarityReport rep;
  auto V = rows_of(v);
  std::array<PairSimilarities, 2> pairs{pair_protocol(rows_of(m_ev), V, ids), pair_protocol(rows_of(m_iv), V, ids)};
  for (std::size_t t = 0; t < kThresholds.size(); ++t) {
    ThresholdMetrics a = threshold_metrics(pairs[0].matched, pairs[0].unmatched, kThresholds[t]);
    ThresholdMetrics b = threshold_metrics(pairs[1].matched, pairs[1].unmatched, kThresholds[t]);
    ThresholdMetrics& r = rep.per_threshold[t];
    r.thr = kThresholds[t];
    r.tp = a.tp + b.tp;
    r.fp = a.fp + b.fp;
    r.fn = a.fn + b.fn;
    r.precision = 0.5 * (a.precision + b.precision);
    r.recall = 0.5 * (a.recall + b.recall);
    r.f1 = 0.5 * (a.f1 + b.f1);
    r.undefined = a.undefined || b.undefined;
  }
  auto unit = [&](const Tensor& t) {
    auto rows = rows_of(t);
    if (normalize_consistency)
      for (auto& r : rows) {
        double n = 0;
        for (double x : r) n += x * x;
        n = std::sqrt(n) + 1e-12;
        for (double& x : r) x /= n;
      }
    return rows;
  };
  auto Vn = unit(v);
  ConsistencyReport ce = consistency_metrics(unit(m_ev), Vn), ci = consistency_metrics(unit(m_iv), Vn);
  rep.consistency.modality_gap = 0.5 * (ce.modality_gap + ci.modality_gap);
  rep.consistency.alignment = 0.5 * (ce.alignment + ci.alignment);
  auto mean = [](const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return s / double(xs.size());
  };
  rep.positive_cosine_explicit = mean(pairs[0].matched);
  rep.positive_cosine_implicit = mean(pairs[1].matched);
  rep.mean_positive_cosine = 0.5 * (rep.positive_cosine_explicit + rep.positive_cosine_implicit);
  return rep;
}

inline nlohmann::json to_json(const ThresholdMetrics& m) {
  return {{"thr", m.thr},         {"tp", m.tp},         {"fp", m.fp},   {"fn", m.fn},
          {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"undefined", m.undefined}};
}

inline nlohmann::json to_json(const SimilarityReport& r) {
  nlohmann::json j;
  for (const auto& m : r.per_threshold) {
    char key[16];
    std::snprintf(key, sizeof(key), "%.1f", m.thr);
    j["per_threshold"][key] = to_json(m);
  }
  j["consistency"] = {{"modality_gap", r.consistency.modality_gap}, {"alignment", r.consistency.alignment}};
  j["mean_positive_cosine"] = r.mean_positive_cosine;
  j["positive_cosine_explicit"] = r.positive_cosine_explicit;
  j["positive_cosine_implicit"] = r.positive_cosine_implicit;
  return j;
}

// ---------------------------------------------------------------------------
// MOT scoring

struct MotMetrics {
  double idf1 = 0.0;
  double mota = 0.0;
  long fragments = 0;
  long id_switches = 0;
  long fp = 0, fn = 0, gt = 0, idtp = 0;
};

namespace detail {

using FrameBoxes = std::map<int, std::vector<Observation>>;

inline FrameBoxes group_by_frame(const std::vector<Observation>& obs) {
  FrameBoxes out;
  for (const auto& o : obs) out[o.frame].push_back(o);
  return out;
}

}  // namespace detail

/// IDF1 by optimal identity matching over per-frame IoU >= 0.5 overlaps;
/// MOTA by CLEAR matching that keeps previous correspondences when still
/// valid; fragments = number of constant-hypothesis segments over all
/// ground-truth trajectories.
inline MotMetrics mot_metrics(const std::vector<Observation>& result, const std::vector<Observation>& gt,
                              double iou_thr = 0.5) {
  MotMetrics m;
  auto gt_frames = detail::group_by_frame(gt);
  auto res_frames = detail::group_by_frame(result);
  const int max_frame = gt_frames.empty() ? 0 : gt_frames.rbegin()->first;
  for (const auto& [f, _] : res_frames)
    if (f < 1 || f > max_frame)
      throw std::invalid_argument("mot_metrics: result frame " + std::to_string(f) + " outside ground truth range [1, " +
                                  std::to_string(max_frame) + "]");

  std::vector<int> gt_ids, res_ids;
  {
    std::set<int> g, r;
    for (const auto& o : gt) g.insert(o.id);
    for (const auto& o : result) r.insert(o.id);
    gt_ids.assign(g.begin(), g.end());
    res_ids.assign(r.begin(), r.end());
  }
  std::map<int, int> gi, ri;
  for (std::size_t i = 0; i < gt_ids.size(); ++i) gi[gt_ids[i]] = int(i);
  for (std::size_t i = 0; i < res_ids.size(); ++i) ri[res_ids[i]] = int(i);
  Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(gt_ids.size(), res_ids.size());

  std::map<int, int> last_match;  // gt id -> hyp id
  std::map<int, int> prev_frame_match;
  m.gt = static_cast<long>(gt.size());
  long matches = 0;
  for (const auto& [f, gts] : gt_frames) {
    static const std::vector<Observation> empty;
    auto it = res_frames.find(f);
    const auto& hyps = it == res_frames.end() ? empty : it->second;
    for (const auto& g : gts)
      for (const auto& h : hyps)
        if (iou(g, h) >= iou_thr) overlap(gi[g.id], ri[h.id]) += 1.0;

    // CLEAR: keep valid correspondences from the previous frame first
    std::vector<bool> g_used(gts.size(), false), h_used(hyps.size(), false);
    std::map<int, int> frame_match;
    for (std::size_t a = 0; a < gts.size(); ++a) {
      auto pm = prev_frame_match.find(gts[a].id);
      if (pm == prev_frame_match.end()) continue;
      for (std::size_t b = 0; b < hyps.size(); ++b)
        if (!h_used[b] && hyps[b].id == pm->second && iou(gts[a], hyps[b]) >= iou_thr) {
          g_used[a] = h_used[b] = true;
          frame_match[gts[a].id] = hyps[b].id;
          break;
        }
    }
    std::vector<int> rows, cols;
    for (std::size_t a = 0; a < gts.size(); ++a)
      if (!g_used[a]) rows.push_back(int(a));
    for (std::size_t b = 0; b < hyps.size(); ++b)
      if (!h_used[b]) cols.push_back(int(b));
    Eigen::MatrixXd c(rows.size(), cols.size());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const double v = iou(gts[rows[r]], hyps[cols[k]]);
        c(r, k) = v >= iou_thr ? 1.0 - v : std::numeric_limits<double>::infinity();
      }
    for (auto [r, k] : hungarian(c).pairs) frame_match[gts[rows[r]].id] = hyps[cols[k]].id;

    for (const auto& [gid, hid] : frame_match) {
      auto lm = last_match.find(gid);
      if (lm != last_match.end() && lm->second != hid) ++m.id_switches;
      if (lm == last_match.end() || lm->second != hid) ++m.fragments;
      last_match[gid] = hid;
    }
    matches += static_cast<long>(frame_match.size());
    m.fp += static_cast<long>(hyps.size() - frame_match.size());
    m.fn += static_cast<long>(gts.size() - frame_match.size());
    prev_frame_match = std::move(frame_match);
  }
  for (const auto& [f, hyps] : res_frames)
    if (!gt_frames.count(f)) m.fp += static_cast<long>(hyps.size());

  if (!gt_ids.empty() && !res_ids.empty()) {
    Assignment a = hungarian(-overlap);
    for (auto [r, k] : a.pairs) m.idtp += static_cast<long>(overlap(r, k));
  }
  const double denom = double(gt.size() + result.size());
  m.idf1 = denom > 0 ? 2.0 * double(m.idtp) / denom : 0.0;
  m.mota = m.gt > 0 ? 1.0 - double(m.fn + m.fp + m.id_switches) / double(m.gt) : 0.0;
  return m;
}

inline nlohmann::json to_json(const MotMetrics& m) {
  return {{"idf1", m.idf1}, {"mota", m.mota}, {"fragments", m.fragments}, {"id_switches", m.id_switches},
          {"fp", m.fp},     {"fn", m.fn},     {"gt", m.gt},               {"idtp", m.idtp}};
}

/// Unweighted mean of every numeric leaf across per-sequence reports.
inline nlohmann::json aggregate_equal_weight(const std::vector<nlohmann::json>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_equal_weight: no reports");
  nlohmann::json out = reports[0];
  std::function<void(nlohmann::json&, const std::vector<const nlohmann::json*>&)> fold =
      [&](nlohmann::json& dst, const std::vector<const nlohmann::json*>& srcs) {
        if (dst.is_object()) {
          for (auto& [k, v] : dst.items()) {
            std::vector<const nlohmann::json*> sub;
            for (auto* s : srcs) sub.push_back(&s->at(k));
            fold(v, sub);
          }
        } else if (dst.is_number()) {
          double s = 0;
          for (auto* x : srcs) s += x->get<double>();
          dst = s / double(srcs.size());
        }
      };
  std::vector<const nlohmann::json*> srcs;
  for (const auto& r : reports) srcs.push_back(&r);
  fold(out, srcs);
  return out;
}

/// Plain-text table in the layout of the loss / injection ablations.
inline std::string format_table(const std::vector<std::pair<std::string, SimilarityReport>>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-28s", "config");
  out += buf;
  for (double t : kThresholds) {
    std::snprintf(buf, sizeof(buf), " | Pre@%.1f Rec@%.1f F1@%.1f", t, t, t);
    out += buf;
  }
  out += " | Gap     Align\n";
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof(buf), "%-28s", name.c_str());
    out += buf;
    for (const auto& m : r.per_threshold) {
      std::snprintf(buf, sizeof(buf), " |  %.3f   %.3f  %.3f", m.precision, m.recall, m.f1);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), " | %.4f  %.4f\n", r.consistency.modality_gap, r.consistency.alignment);
    out += buf;
  }
  return out;
}

}  // namespace epiptrack
