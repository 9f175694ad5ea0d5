#pragma once

// Tracking-by-detection: Kalman prediction, a BYTE-style high/low score
// cascade, optional fusion of the first-stage cost with a multimodal cosine
// cost, and an optional third stage that reassociates leftover tracks by
// embedding alone.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "epiptrack/datamodel.hpp"
#include "epiptrack/explicit_prompts.hpp"
#include "epiptrack/hungarian.hpp"
#include "epiptrack/kalman.hpp"
#include "epiptrack/model.hpp"

namespace epiptrack {

inline double iou(const Observation& a, const Observation& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

using Embedding = Eigen::VectorXd;

inline double cosine(const Embedding& a, const Embedding& b) {
  return a.dot(b) / ((a.norm() + 1e-12) * (b.norm() + 1e-12));
}

/// 0.5 * sum over branches of (1 - cos(track branch, detection)); in [0, 2].
inline Eigen::MatrixXd multimodal_cost(const std::vector<Embedding>& track_ev, const std::vector<Embedding>& track_iv,
                                       const std::vector<Embedding>& det) {
  if (track_ev.size() != track_iv.size()) throw std::invalid_argument("multimodal_cost: branch size mismatch");
  Eigen::MatrixXd c(track_ev.size(), det.size());
  for (std::size_t i = 0; i < track_ev.size(); ++i)
    for (std::size_t j = 0; j < det.size(); ++j)
      c(i, j) = 0.5 * ((1.0 - cosine(track_ev[i], det[j])) + (1.0 - cosine(track_iv[i], det[j])));
  return c;
}

enum class TrackState { tentative, confirmed, lost, removed };

inline const char* to_string(TrackState s) {
  switch (s) {
    case TrackState::tentative: return "tentative";
    case TrackState::confirmed: return "confirmed";
    case TrackState::lost: return "lost";
    case TrackState::removed: return "removed";
  }
  return "removed";
}

struct Track {
  int id = 0;
  TrackState state = TrackState::tentative;
  KalmanState kalman;
  std::vector<Observation> history;
  int last_frame = 0;
  Embedding emb_explicit;  // E_m^ev, empty until the first embedding update
  Embedding emb_implicit;  // E_m^iv

  Observation predicted_box() const { return KalmanFilter::box(kalman); }
  bool has_embedding() const { return emb_explicit.size() > 0; }
};

struct AssociationMode {
  bool tr = false;
  bool fr = false;
};

inline AssociationMode parse_association_mode(const std::string& s) {
  if (s == "baseline") return {false, false};
  if (s == "tr") return {true, false};
  if (s == "fr") return {false, true};
  if (s == "trfr") return {true, true};
  throw std::invalid_argument("unknown association mode '" + s + "' (expected baseline|tr|fr|trfr)");
}

inline std::string to_string(AssociationMode m) {
  return m.tr ? (m.fr ? "trfr" : "tr") : (m.fr ? "fr" : "baseline");
}

struct AssociationConfig {
  double high_score_thr = 0.6;
  double low_score_thr = 0.1;
  double iou_gate = 0.3;
  double tr_gate = 0.4;
  double fr_weight = 0.5;
  int max_lost_frames = 30;
  double ema_momentum = 0.9;

  void validate() const {
    auto unit = [](double v, const char* name) {
      if (v < 0.0 || v > 1.0) throw std::invalid_argument(std::string("association config: ") + name + " must be in [0,1]");
    };
    unit(high_score_thr, "high_score_thr");
    unit(low_score_thr, "low_score_thr");
    unit(iou_gate, "iou_gate");
    unit(fr_weight, "fr_weight");
    unit(ema_momentum, "ema_momentum");
    if (tr_gate < 0.0 || tr_gate > 2.0) throw std::invalid_argument("association config: tr_gate must be in [0,2]");
    if (low_score_thr > high_score_thr)
      throw std::invalid_argument("association config: low_score_thr exceeds high_score_thr");
    if (max_lost_frames < 0) throw std::invalid_argument("association config: max_lost_frames must be >= 0");
  }
};

struct AssociationEvent {
  int frame = 0;
  std::string event;  // matched | lost | reassociated | spawned
  int track_id = 0;
  int det_idx = -1;
  int stage = 0;

  nlohmann::json to_json() const {
    return {{"frame", frame}, {"event", event}, {"track_id", track_id}, {"det_idx", det_idx}, {"stage", stage}};
  }
};

/// Supplies per-detection visual embeddings and, for matched pairs, the
/// track-side multimodal embeddings.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<Embedding> detection_embeddings(const Frame& frame) = 0;
  /// One (explicit, implicit) pair per (track, detection index).
  virtual std::vector<std::pair<Embedding, Embedding>> track_embeddings(
      const Frame& frame, const std::vector<std::pair<const Track*, int>>& matches) = 0;
};

/// One-hot embedding of each detection's true identity. Unknown identities
/// map to the zero vector, whose cosine with anything is 0.
class OracleEmbeddings : public EmbeddingProvider {
 public:
  /// `identity[f - 1][j]` is the identity behind detection j of frame f.
  OracleEmbeddings(std::vector<std::vector<int>> identity, int n_identities)
      : identity_(std::move(identity)), dim_(std::max(1, n_identities)) {}

  /// Maps detections to ground truth by maximum IoU (>= 0.5) per frame.
  static OracleEmbeddings from_ground_truth(const std::vector<Frame>& frames, const std::vector<Observation>& gt) {
    std::map<int, std::vector<Observation>> by_frame;
    int max_id = 0;
    for (const auto& o : gt) {
      by_frame[o.frame].push_back(o);
      max_id = std::max(max_id, o.id);
    }
    std::vector<std::vector<int>> identity;
    for (const auto& f : frames) {
      std::vector<int> ids;
      for (const auto& d : f.detections) {
        int best = kUnsetId;
        double best_iou = 0.5;
        for (const auto& g : by_frame[f.index]) {
          const double v = iou(d, g);
          if (v >= best_iou) {
            best_iou = v;
            best = g.id;
          }
        }
        ids.push_back(best);
      }
      identity.push_back(std::move(ids));
    }
    return OracleEmbeddings(std::move(identity), max_id);
  }

  Embedding one_hot(int id) const {
    Embedding e = Embedding::Zero(dim_);
    if (id >= 1 && id <= dim_) e(id - 1) = 1.0;
    return e;
  }

  int identity_of(const Frame& frame, int det_idx) const {
    const auto& ids = identity_.at(static_cast<std::size_t>(frame.index - 1));
    return ids.at(static_cast<std::size_t>(det_idx));
  }

  std::vector<Embedding> detection_embeddings(const Frame& frame) override {
    std::vector<Embedding> out;
    for (std::size_t j = 0; j < frame.detections.size(); ++j) out.push_back(one_hot(identity_of(frame, int(j))));
    return out;
  }

  std::vector<std::pair<Embedding, Embedding>> track_embeddings(
      const Frame& frame, const std::vector<std::pair<const Track*, int>>& matches) override {
    std::vector<std::pair<Embedding, Embedding>> out;
    for (const auto& [track, j] : matches) {
      Embedding e = one_hot(identity_of(frame, j));
      out.emplace_back(e, e);
    }
    return out;
  }

 private:
  std::vector<std::vector<int>> identity_;
  int dim_;
};

inline Embedding to_embedding(const Tensor& t, std::size_t row) {
  const std::size_t d = t.dim(1);
  Embedding e(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) e(static_cast<Eigen::Index>(j)) = t.data()[row * d + j];
  return e;
}

/// Embeddings from a trained model: E_dv over the frame's detections and
/// E_m^ev / E_m^iv from the matched detection crop with prompts built from
/// the track's id and motion state.
class ModelEmbeddings : public EmbeddingProvider {
 public:
  explicit ModelEmbeddings(const EpipModel& model) : model_(model) {}

  std::vector<Embedding> detection_embeddings(const Frame& frame) override {
    std::vector<Embedding> out;
    if (frame.detections.empty()) return out;
    CropBatch crops = crop_all(frame, frame.detections);
    ag::NoGradGuard guard;
    Tensor e = model_.visual_embeddings(preprocess_crops(crops)).embedding;
    for (std::size_t j = 0; j < frame.detections.size(); ++j) out.push_back(to_embedding(e, j));
    return out;
  }

  std::vector<std::pair<Embedding, Embedding>> track_embeddings(
      const Frame& frame, const std::vector<std::pair<const Track*, int>>& matches) override {
    std::vector<std::pair<Embedding, Embedding>> out;
    if (matches.empty()) return out;
    std::vector<Observation> dets;
    std::vector<ExplicitPromptSet> prompts;
    for (const auto& [track, j] : matches) {
      Observation det = frame.detections.at(static_cast<std::size_t>(j));
      det.id = track->id;
      det.frame = frame.index;
      dets.push_back(det);
      std::vector<Observation> hist;
      if (!track->history.empty()) {
        Observation prev = track->history.back();
        prev.id = track->id;
        if (prev.frame < det.frame) hist.push_back(prev);
      }
      hist.push_back(det);
      prompts.push_back(render_explicit_prompts(track->id, motion_attributes(hist, frame.height)));
    }
    CropBatch crops = crop_all(frame, dets);
    ag::NoGradGuard guard;
    ModelOutputs o = model_.forward(crops, prompts);
    for (std::size_t i = 0; i < matches.size(); ++i)
      out.emplace_back(to_embedding(o.multimodal_explicit, i), to_embedding(o.multimodal_implicit, i));
    return out;
  }

 private:
  const EpipModel& model_;

  static CropBatch crop_all(const Frame& frame, const std::vector<Observation>& dets) {
    if (!frame.image) throw std::runtime_error("model embeddings need frame images (frame " + std::to_string(frame.index) + ")");
    CropBatch b;
    for (const auto& d : dets) {
      b.crops.push_back(crop_and_resize(*frame.image, d));
      b.ids.push_back(d.id);
      b.meta.push_back(d);
    }
    return b;
  }
};

struct FrameResult {
  std::vector<Observation> outputs;  // confirmed tracks updated this frame
  std::vector<AssociationEvent> events;
};

class Tracker {
 public:
  Tracker(AssociationConfig cfg, AssociationMode mode, EmbeddingProvider* embeddings = nullptr)
      : cfg_(cfg), mode_(mode), embeddings_(embeddings) {
    cfg_.validate();
    if ((mode_.tr || mode_.fr) && !embeddings_)
      throw std::invalid_argument("tracker: embeddings are required when TR or FR is enabled");
  }

  const std::vector<Track>& tracks() const { return tracks_; }

  FrameResult step(const Frame& frame) {
    FrameResult res;
    const int f = frame.index;
    const bool first_frame = frames_seen_++ == 0;
    for (auto& t : tracks_) kf_.predict(t.kalman);

    const auto& dets = frame.detections;
    dets_view_ = &dets;
    std::vector<Embedding> det_emb;
    if (embeddings_ && !dets.empty()) det_emb = embeddings_->detection_embeddings(frame);

    std::vector<int> high, low;
    for (int j = 0; j < static_cast<int>(dets.size()); ++j) {
      if (dets[j].score >= cfg_.high_score_thr) high.push_back(j);
      else if (dets[j].score >= cfg_.low_score_thr) low.push_back(j);
    }
    std::vector<int> det_match(dets.size(), -1);  // track index per detection
    std::vector<int> track_match(tracks_.size(), -1);
    std::vector<int> match_stage(tracks_.size(), 0);

    auto record = [&](int ti, int dj, int stage) {
      track_match[ti] = dj;
      det_match[dj] = ti;
      match_stage[ti] = stage;
    };

    // stage 1: confirmed and lost tracks x high-score detections
    std::vector<int> pool;
    for (int i = 0; i < static_cast<int>(tracks_.size()); ++i)
      if (tracks_[i].state == TrackState::confirmed || tracks_[i].state == TrackState::lost) pool.push_back(i);
    match_by_iou(pool, high, 1, track_match, det_match, det_emb, mode_.fr, record);

    // stage 2: still-unmatched confirmed tracks x low-score detections
    std::vector<int> active;
    for (int i : pool)
      if (track_match[i] < 0 && tracks_[i].state == TrackState::confirmed) active.push_back(i);
    match_by_iou(active, low, 2, track_match, det_match, det_emb, false, record);

    // tentative tracks x leftover high-score detections
    std::vector<int> tentative;
    for (int i = 0; i < static_cast<int>(tracks_.size()); ++i)
      if (tracks_[i].state == TrackState::tentative) tentative.push_back(i);
    match_by_iou(tentative, high, 1, track_match, det_match, det_emb, false, record);

    // stage 3: every leftover track x leftover detections by embedding
    std::vector<bool> reassociated(tracks_.size(), false);
    if (mode_.tr) {
      std::vector<int> rows, cols;
      for (int i = 0; i < static_cast<int>(tracks_.size()); ++i)
        if (track_match[i] < 0 && tracks_[i].has_embedding()) rows.push_back(i);
      for (int j = 0; j < static_cast<int>(dets.size()); ++j)
        if (det_match[j] < 0 && dets[j].score >= cfg_.low_score_thr) cols.push_back(j);
      if (!rows.empty() && !cols.empty()) {
        Eigen::MatrixXd c = embedding_cost(rows, cols, det_emb);
        Assignment a = hungarian(c, std::nextafter(cfg_.tr_gate, 0.0));
        for (auto [r, k] : a.pairs) {
          record(rows[r], cols[k], 3);
          reassociated[rows[r]] = true;
        }
      }
    }

    // apply matches
    std::vector<std::pair<const Track*, int>> emb_requests;
    std::vector<int> emb_tracks;
    for (int i = 0; i < static_cast<int>(tracks_.size()); ++i) {
      Track& t = tracks_[i];
      const int j = track_match[i];
      if (j < 0) continue;
      kf_.update(t.kalman, to_xyah(dets[j]));
      if (embeddings_) {
        emb_requests.emplace_back(&t, j);
        emb_tracks.push_back(i);
      }
      res.events.push_back({f, reassociated[i] ? "reassociated" : "matched", t.id, j, match_stage[i]});
    }
    update_embeddings(frame, emb_requests, emb_tracks);
    for (int i = 0; i < static_cast<int>(tracks_.size()); ++i) {
      Track& t = tracks_[i];
      const int j = track_match[i];
      if (j < 0) continue;
      Observation o = dets[j];
      o.id = t.id;
      o.frame = f;
      t.history.push_back(o);
      t.last_frame = f;
      t.state = TrackState::confirmed;
      res.outputs.push_back(o);
    }

    // unmatched tracks
    for (int i = 0; i < static_cast<int>(tracks_.size()); ++i) {
      Track& t = tracks_[i];
      if (track_match[i] >= 0) continue;
      if (t.state == TrackState::tentative) {
        t.state = TrackState::removed;
      } else if (t.state == TrackState::confirmed) {
        t.state = TrackState::lost;
        res.events.push_back({f, "lost", t.id, -1, 0});
      }
      if (t.state == TrackState::lost && f - t.last_frame > cfg_.max_lost_frames) t.state = TrackState::removed;
    }
    std::erase_if(tracks_, [](const Track& t) { return t.state == TrackState::removed; });

    // spawn
    std::vector<std::pair<const Track*, int>> spawn_requests;
    std::vector<int> spawn_tracks, spawn_dets;
    for (int j : high) {
      if (det_match[j] >= 0) continue;
      Track t;
      t.id = next_id_++;
      t.state = first_frame ? TrackState::confirmed : TrackState::tentative;
      t.kalman = kf_.initiate(to_xyah(dets[j]));
      Observation o = dets[j];
      o.id = t.id;
      o.frame = f;
      t.last_frame = f;
      t.history.push_back(o);
      tracks_.push_back(std::move(t));
      res.events.push_back({f, "spawned", o.id, j, 0});
      if (first_frame) res.outputs.push_back(o);
      spawn_tracks.push_back(static_cast<int>(tracks_.size()) - 1);
      spawn_dets.push_back(j);
    }
    // the new track's own detection seeds its embedding
    for (std::size_t k = 0; k < spawn_tracks.size(); ++k)
      spawn_requests.emplace_back(&tracks_[spawn_tracks[k]], spawn_dets[k]);
    update_embeddings(frame, spawn_requests, spawn_tracks);
    dets_view_ = nullptr;
    return res;
  }

 private:
  AssociationConfig cfg_;
  AssociationMode mode_;
  EmbeddingProvider* embeddings_;
  KalmanFilter kf_;
  std::vector<Track> tracks_;
  int next_id_ = 1;
  int frames_seen_ = 0;

  Eigen::MatrixXd embedding_cost(const std::vector<int>& rows, const std::vector<int>& cols,
                                 const std::vector<Embedding>& det_emb) const {
    std::vector<Embedding> ev, iv, de;
    for (int i : rows) {
      ev.push_back(tracks_[i].emb_explicit);
      iv.push_back(tracks_[i].emb_implicit);
    }
    for (int j : cols) de.push_back(det_emb.at(static_cast<std::size_t>(j)));
    return multimodal_cost(ev, iv, de);
  }

  template <typename Record>
  void match_by_iou(const std::vector<int>& rows, const std::vector<int>& all_cols, int stage,
                    const std::vector<int>& track_match, const std::vector<int>& det_match,
                    const std::vector<Embedding>& det_emb, bool fuse, Record&& record) {
    std::vector<int> cols;
    for (int j : all_cols)
      if (det_match[j] < 0) cols.push_back(j);
    std::vector<int> free_rows;
    for (int i : rows)
      if (track_match[i] < 0) free_rows.push_back(i);
    if (free_rows.empty() || cols.empty()) return;
    Eigen::MatrixXd c(free_rows.size(), cols.size());
    Eigen::MatrixXd emb;
    std::vector<bool> has_emb(free_rows.size(), false);
    if (fuse) {
      emb = Eigen::MatrixXd::Zero(free_rows.size(), cols.size());
      std::vector<int> er;
      for (std::size_t r = 0; r < free_rows.size(); ++r)
        if (tracks_[free_rows[r]].has_embedding()) {
          has_emb[r] = true;
          er.push_back(free_rows[r]);
        }
      if (!er.empty()) {
        Eigen::MatrixXd e = embedding_cost(er, cols, det_emb);
        for (std::size_t r = 0, k = 0; r < free_rows.size(); ++r)
          if (has_emb[r]) emb.row(static_cast<Eigen::Index>(r)) = e.row(static_cast<Eigen::Index>(k++));
      }
    }
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < free_rows.size(); ++r) {
      const Observation pred = tracks_[free_rows[r]].predicted_box();
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const double v = iou(pred, dets_view_->at(static_cast<std::size_t>(cols[k])));
        double cost = 1.0 - v;
        if (fuse && has_emb[r])
          cost = (1.0 - cfg_.fr_weight) * cost + cfg_.fr_weight * 0.5 * emb(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
        c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = v >= cfg_.iou_gate ? cost : inf;
      }
    }
    Assignment a = hungarian(c);
    for (auto [r, k] : a.pairs) record(free_rows[r], cols[k], stage);
  }

  const std::vector<Observation>* dets_view_ = nullptr;

  void update_embeddings(const Frame& frame, const std::vector<std::pair<const Track*, int>>& requests,
                         const std::vector<int>& which) {
    if (!embeddings_ || requests.empty()) return;
    auto embs = embeddings_->track_embeddings(frame, requests);
    for (std::size_t k = 0; k < which.size(); ++k) {
      Track& t = tracks_[which[k]];
      const double mom = cfg_.ema_momentum;
      if (!t.has_embedding()) {
        t.emb_explicit = embs[k].first;
        t.emb_implicit = embs[k].second;
      } else {
        t.emb_explicit = mom * t.emb_explicit + (1.0 - mom) * embs[k].first;
        t.emb_implicit = mom * t.emb_implicit + (1.0 - mom) * embs[k].second;
      }
    }
  }
};

struct TrackingOutput {
  std::vector<Observation> results;
  std::vector<AssociationEvent> events;

  std::string events_jsonl() const {
    std::string out;
    for (const auto& e : events) out += e.to_json().dump() + "\n";
    return out;
  }
};

inline TrackingOutput track_sequence(const std::vector<Frame>& frames, AssociationMode mode,
                                     EmbeddingProvider* embeddings = nullptr, const AssociationConfig& cfg = {}) {
  Tracker tracker(cfg, mode, embeddings);
  TrackingOutput out;
  for (const auto& frame : frames) {
    FrameResult r = tracker.step(frame);
    out.results.insert(out.results.end(), r.outputs.begin(), r.outputs.end());
    out.events.insert(out.events.end(), r.events.begin(), r.events.end());
  }
  return out;
}

}  // namespace epiptrack
