#include <gtest/gtest.h>

#include <map>
#include <set>

#include "oracles.hpp"

using namespace epiptrack;

namespace {

Observation box(double x1, double y1, double x2, double y2, int frame = 1, int id = kUnsetId, double score = 0.9) {
  Observation o;
  o.x1 = x1;
  o.y1 = y1;
  o.x2 = x2;
  o.y2 = y2;
  o.frame = frame;
  o.id = id;
  o.score = score;
  return o;
}

SyntheticSequence synth(MotionModel motion, std::uint64_t seed = 7) {
  SynthSpec spec;
  spec.motion = motion;
  spec.render_images = false;
  spec.seed = seed;
  return generate_synthetic_sequence(spec);
}

struct TrackRun {
  MotMetrics metrics;
  TrackingOutput out;
};

TrackRun run(const SyntheticSequence& seq, const std::string& mode) {
  OracleEmbeddings emb(seq.det_identity, 5);
  TrackRun r;
  r.out = track_sequence(seq.frames, parse_association_mode(mode), &emb);
  r.metrics = mot_metrics(r.out.results, seq.gt);
  return r;
}

}  // namespace

TEST(Iou, Examples) {
  EXPECT_DOUBLE_EQ(iou(box(0, 0, 10, 10), box(0, 0, 10, 10)), 1.0);
  EXPECT_DOUBLE_EQ(iou(box(0, 0, 10, 10), box(10, 0, 20, 10)), 0.0);
  EXPECT_NEAR(iou(box(0, 0, 10, 10), box(5, 0, 15, 10)), 50.0 / 150.0, 1e-12);
  EXPECT_NEAR(iou(box(0, 0, 10, 10), box(2, 2, 8, 8)), 36.0 / 100.0, 1e-12);
}

TEST(Hungarian, SmallCases) {
  Eigen::MatrixXd c(2, 2);
  c << 1, 2, 2, 1;
  Assignment a = hungarian(c);
  ASSERT_EQ(a.pairs.size(), 2u);
  EXPECT_EQ(a.pairs[0], std::make_pair(0, 0));
  EXPECT_EQ(a.pairs[1], std::make_pair(1, 1));
  EXPECT_DOUBLE_EQ(a.total, 2.0);

  Eigen::MatrixXd r(2, 3);
  r << 5, 1, 9, 2, 8, 9;
  a = hungarian(r);
  ASSERT_EQ(a.pairs.size(), 2u);
  ASSERT_EQ(a.unmatched_cols, std::vector<int>{2});
  EXPECT_DOUBLE_EQ(a.total, 3.0);
}

TEST(Hungarian, GateForbidsEntries) {
  Eigen::MatrixXd c(2, 2);
  c << 0.1, 0.9, 0.9, 0.9;
  Assignment a = hungarian(c, 0.5);
  ASSERT_EQ(a.pairs.size(), 1u);
  EXPECT_EQ(a.pairs[0], std::make_pair(0, 0));
  EXPECT_EQ(a.unmatched_rows, std::vector<int>{1});
  EXPECT_EQ(a.unmatched_cols, std::vector<int>{1});
}

TEST(Hungarian, ColumnPermutationInvariantTotal) {
  oracle::Rng rng(5);
  std::uniform_int_distribution<int> v(0, 20);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + trial % 5, m = n + trial % 3;
    Eigen::MatrixXd c(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) c(i, j) = v(rng);
    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd p(n, m);
    for (int j = 0; j < m; ++j) p.col(j) = c.col(perm[j]);
    EXPECT_DOUBLE_EQ(hungarian(c).total, hungarian(p).total);
  }
  EXPECT_EQ(oracle::hungarian_mismatches(9, 6), 0);
}

TEST(MultimodalCost, ValuesAndRange) {
  Embedding a = Embedding::Unit(3, 0), b = Embedding::Unit(3, 1);
  Eigen::MatrixXd c = multimodal_cost({a, a, -a}, {a, b, -a}, {a});
  EXPECT_NEAR(c(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(c(1, 0), 0.5, 1e-9);
  EXPECT_NEAR(c(2, 0), 2.0, 1e-9);
  oracle::Rng rng(6);
  std::normal_distribution<double> g;
  for (int t = 0; t < 50; ++t) {
    Embedding x(4), y(4), z(4);
    for (int k = 0; k < 4; ++k) x(k) = g(rng), y(k) = g(rng), z(k) = g(rng);
    const double v = multimodal_cost({x}, {y}, {z})(0, 0);
    EXPECT_GE(v, -1e-12);
    EXPECT_LE(v, 2.0 + 1e-12);
  }
  EXPECT_THROW(multimodal_cost({a}, {}, {a}), std::invalid_argument);
}

TEST(Kalman, CovarianceStaysSymmetricPsdAndHeightPositive) {
  KalmanFilter kf;
  KalmanState s = kf.initiate(to_xyah(box(10, 10, 34, 66)));
  oracle::Rng rng(8);
  std::normal_distribution<double> noise(0.0, 2.0);
  for (int t = 0; t < 100; ++t) {
    kf.predict(s);
    if (t % 3 != 0) kf.update(s, to_xyah(box(10 + 2 * t + noise(rng), 10, 34 + 2 * t + noise(rng), 66 + noise(rng))));
    EXPECT_LT((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    Eigen::SelfAdjointEigenSolver<Matrix8> es(s.cov);
    EXPECT_GT(es.eigenvalues().minCoeff(), -1e-9);
    EXPECT_GT(s.mean(3), 0.0);
  }
}

TEST(Tracker, SingleDetectionMatchesInStageOne) {
  for (const char* mode : {"baseline", "tr", "fr", "trfr"}) {
    std::vector<Frame> frames(2);
    for (int f = 0; f < 2; ++f) {
      frames[f].index = f + 1;
      frames[f].width = 200;
      frames[f].height = 200;
      frames[f].detections = {box(50 + f, 50, 80 + f, 110, f + 1)};
    }
    OracleEmbeddings emb({{1}, {1}}, 1);
    TrackingOutput out = track_sequence(frames, parse_association_mode(mode), &emb);
    ASSERT_EQ(out.results.size(), 2u) << mode;
    EXPECT_EQ(out.results[0].id, out.results[1].id);
    bool matched = false;
    for (const auto& e : out.events)
      if (e.frame == 2 && e.event == "matched") {
        EXPECT_EQ(e.stage, 1);
        matched = true;
      }
    EXPECT_TRUE(matched) << mode;
  }
}

TEST(Tracker, EmptyFrameAgesTracks) {
  Tracker t({}, {});
  Frame f1;
  f1.index = 1;
  f1.detections = {box(10, 10, 40, 80), box(100, 10, 130, 80)};
  t.step(f1);
  ASSERT_EQ(t.tracks().size(), 2u);
  Frame f2;
  f2.index = 2;
  FrameResult r = t.step(f2);
  EXPECT_TRUE(r.outputs.empty());
  int lost = 0;
  for (const auto& e : r.events) {
    EXPECT_NE(e.event, "matched");
    lost += e.event == "lost";
  }
  EXPECT_EQ(lost, 2);
  for (const auto& tr : t.tracks()) {
    EXPECT_EQ(tr.last_frame, 1);
    EXPECT_EQ(tr.state, TrackState::lost);
  }
}

TEST(Tracker, EmbeddingModesNeedProvider) {
  EXPECT_THROW(Tracker({}, parse_association_mode("tr")), std::invalid_argument);
  EXPECT_THROW(parse_association_mode("bytetrack"), std::invalid_argument);
  AssociationConfig bad;
  bad.low_score_thr = 0.9;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Tracker, LinearSequencePerfectInAllModes) {
  auto seq = synth(MotionModel::linear);
  for (const char* mode : {"baseline", "tr", "fr", "trfr"}) {
    TrackRun r = run(seq, mode);
    EXPECT_DOUBLE_EQ(r.metrics.idf1, 1.0) << mode;
    EXPECT_EQ(r.metrics.id_switches, 0) << mode;
  }
}

TEST(Tracker, ReassociationBridgesOcclusionGap) {
  auto seq = synth(MotionModel::occlusion_gap);
  TrackRun base = run(seq, "baseline"), tr = run(seq, "tr");
  EXPECT_LT(tr.metrics.fragments, base.metrics.fragments);
  EXPECT_GT(tr.metrics.idf1, base.metrics.idf1);
  bool reassociated = false;
  for (const auto& e : tr.out.events)
    if (e.event == "reassociated") {
      EXPECT_EQ(e.stage, 3);
      reassociated = true;
    }
  EXPECT_TRUE(reassociated);
}

TEST(Tracker, FusionHelpsOnCrossing) {
  auto seq = synth(MotionModel::crossing);
  TrackRun base = run(seq, "baseline"), fr = run(seq, "fr");
  EXPECT_GT(fr.metrics.idf1, base.metrics.idf1);
  EXPECT_LE(fr.metrics.id_switches, base.metrics.id_switches);
}

TEST(Tracker, ReassociationNeverLinksDifferentIdentities) {
  for (MotionModel motion : {MotionModel::linear, MotionModel::crossing, MotionModel::occlusion_gap})
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto seq = synth(motion, seed);
      TrackRun r = run(seq, "trfr");
      std::map<int, int> identity;  // track id -> identity of its last detection
      for (const auto& e : r.out.events) {
        if (e.det_idx < 0) continue;
        const int who = seq.det_identity.at(std::size_t(e.frame - 1)).at(std::size_t(e.det_idx));
        if (e.event == "reassociated") {
          ASSERT_TRUE(identity.count(e.track_id));
          EXPECT_EQ(identity[e.track_id], who) << to_string(motion) << " seed " << seed << " frame " << e.frame;
        }
        identity[e.track_id] = who;
      }
    }
}

TEST(ThresholdMetrics, Examples) {
  ThresholdMetrics m = threshold_metrics({0.9, 0.85, 0.4}, {0.2, 0.81, 0.1}, 0.8);
  EXPECT_EQ(m.tp, 2);
  EXPECT_EQ(m.fn, 1);
  EXPECT_EQ(m.fp, 1);
  EXPECT_NEAR(m.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.recall, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-12);
  EXPECT_FALSE(m.undefined);
  // strictly greater than the threshold
  EXPECT_EQ(threshold_metrics({0.5}, {}, 0.5).tp, 0);
  EXPECT_TRUE(threshold_metrics({}, {}, 0.5).undefined);
}

TEST(ThresholdMetrics, PermutationInvariantAndRecallMonotone) {
  oracle::Rng rng(10);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> pos(40), neg(90);
  for (auto& x : pos) x = u(rng);
  for (auto& x : neg) x = u(rng);
  double prev_recall = 2.0;
  for (double thr : kThresholds) {
    ThresholdMetrics a = threshold_metrics(pos, neg, thr);
    auto p2 = pos, n2 = neg;
    std::shuffle(p2.begin(), p2.end(), rng);
    std::shuffle(n2.begin(), n2.end(), rng);
    ThresholdMetrics b = threshold_metrics(p2, n2, thr);
    EXPECT_EQ(a.tp, b.tp);
    EXPECT_EQ(a.fp, b.fp);
    EXPECT_DOUBLE_EQ(a.f1, b.f1);
    EXPECT_LE(a.recall, prev_recall);
    prev_recall = a.recall;
  }
}

TEST(PairProtocol, CountsFollowIdentities) {
  std::vector<std::vector<double>> m{{1, 0}, {0, 1}, {1, 1}}, v{{1, 0}, {1, 0}, {0, 1}};
  PairSimilarities p = pair_protocol(m, v, {1, 1, 2});
  ASSERT_EQ(p.matched.size(), 3u);
  // pairs (0,2), (1,2), (2,0), (2,1)
  ASSERT_EQ(p.unmatched.size(), 4u);
  EXPECT_NEAR(p.matched[0], 1.0, 1e-9);
  EXPECT_NEAR(p.matched[1], 0.0, 1e-9);
  EXPECT_NEAR(p.matched[2], std::sqrt(0.5), 1e-9);
  EXPECT_THROW(pair_protocol({{1}}, {{1}}, {1}), std::invalid_argument);
}

TEST(Consistency, Examples) {
  ConsistencyReport same = consistency_metrics({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}});
  EXPECT_DOUBLE_EQ(same.modality_gap, 0.0);
  EXPECT_DOUBLE_EQ(same.alignment, 0.0);
  ConsistencyReport swapped = consistency_metrics({{1, 0}, {0, 1}}, {{0, 1}, {1, 0}});
  EXPECT_DOUBLE_EQ(swapped.modality_gap, 0.0);
  EXPECT_DOUBLE_EQ(swapped.alignment, 2.0);
  ConsistencyReport shifted = consistency_metrics({{1, 0}}, {{0, 0}});
  EXPECT_DOUBLE_EQ(shifted.modality_gap, 1.0);
  EXPECT_DOUBLE_EQ(shifted.alignment, 1.0);
}

TEST(MotMetrics, GroundTruthAgainstItselfIsPerfect) {
  auto seq = synth(MotionModel::crossing);
  MotMetrics m = mot_metrics(seq.gt, seq.gt);
  EXPECT_DOUBLE_EQ(m.idf1, 1.0);
  EXPECT_DOUBLE_EQ(m.mota, 1.0);
  EXPECT_EQ(m.id_switches, 0);
  EXPECT_EQ(m.fragments, 5);

  auto relabeled = seq.gt;
  for (auto& o : relabeled) o.id = 100 - o.id;
  MotMetrics r = mot_metrics(relabeled, seq.gt);
  EXPECT_DOUBLE_EQ(r.idf1, 1.0);
  EXPECT_DOUBLE_EQ(r.mota, 1.0);
}

TEST(MotMetrics, IdSwapMatchesBruteForceIdf1) {
  std::vector<Observation> gt, res;
  for (int f = 1; f <= 10; ++f) {
    gt.push_back(box(0, 0, 10, 20, f, 1));
    gt.push_back(box(50, 0, 60, 20, f, 2));
    res.push_back(box(0, 0, 10, 20, f, f <= 6 ? 7 : 8));
    res.push_back(box(50, 0, 60, 20, f, f <= 6 ? 8 : 7));
  }
  MotMetrics m = mot_metrics(res, gt);
  EXPECT_NEAR(m.idf1, oracle::idf1_bruteforce(res, gt), 1e-12);
  EXPECT_NEAR(m.idf1, 0.6, 1e-12);
  EXPECT_EQ(m.id_switches, 2);
  EXPECT_EQ(m.fragments, 4);
}

TEST(MotMetrics, ResultOutsideGroundTruthFramesThrows) {
  std::vector<Observation> gt{box(0, 0, 10, 10, 1, 1)}, res{box(0, 0, 10, 10, 3, 1)};
  EXPECT_THROW(mot_metrics(res, gt), std::invalid_argument);
}

TEST(Aggregate, EqualWeightMean) {
  nlohmann::json a = {{"idf1", 1.0}, {"name", "a"}, {"nested", {{"x", 2.0}}}};
  nlohmann::json b = {{"idf1", 0.0}, {"name", "b"}, {"nested", {{"x", 4.0}}}};
  nlohmann::json m = aggregate_equal_weight({a, b});
  EXPECT_DOUBLE_EQ(m["idf1"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(m["nested"]["x"].get<double>(), 3.0);
  EXPECT_THROW(aggregate_equal_weight({}), std::invalid_argument);
}
