#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"

using namespace epiptrack;

namespace {

const Dataset& toy_data() {
  static const Dataset ds = build_toy_dataset(toy_train_spec());
  return ds;
}

Batch first_batch(std::size_t seed = 7) {
  TrainConfig cfg;
  nn::Rng rng = epoch_rng(seed, 0);
  auto batches = pk_batches(toy_data().train, cfg.identities_per_batch(), cfg.instances, rng);
  return make_batch(toy_data().train, batches.at(0), 0, 0, nullptr);
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) { return ag::index_select(t, 0, perm); }

void expect_rows_permuted(const Tensor& base, const Tensor& permuted, const std::vector<std::size_t>& perm,
                          double tol = 0.0) {
  auto a = oracle::rows(ag::reshape(base, {base.dim(0), base.numel() / base.dim(0)}));
  auto b = oracle::rows(ag::reshape(permuted, {permuted.dim(0), permuted.numel() / permuted.dim(0)}));
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_LE(oracle::max_abs_diff(b[i], a[perm[i]]), tol) << "row " << i;
}

}  // namespace

// ---------------------------------------------------------------------------
// prompt modulator

TEST(AttributeAdapter, IdentityAndShapes) {
  nn::Rng wr(1);
  AttributeAdapter ad(16, wr);
  ad.explicit_map.set_identity();
  ad.implicit_map.set_identity();
  oracle::Rng rng(2);
  Tensor e = oracle::random_tensor({2, 3, 16}, rng), i = oracle::random_tensor({2, 4, 16}, rng);
  auto [ae, ai] = ad(e, i);
  EXPECT_EQ(ae.shape(), (ag::Shape{2, 3, 16}));
  EXPECT_EQ(ai.shape(), (ag::Shape{2, 4, 16}));
  EXPECT_EQ(ae.values(), e.values());
  EXPECT_EQ(ai.values(), i.values());
  EXPECT_THROW(ad(i, i), std::invalid_argument);
  EXPECT_THROW(ad(e, e), std::invalid_argument);
}

TEST(MNCorrector, ZeroFinalLayerIsAdditiveIdentity) {
  nn::Rng wr(1);
  MNCorrector mn(16, wr);
  ASSERT_EQ(mn.linears.size(), 4u);
  EXPECT_EQ(mn.linears[0].out_features(), 32u);
  EXPECT_EQ(mn.linears[3].out_features(), 16u);
  auto& last = mn.norms.back();
  std::fill(last.gain.mutable_data().begin(), last.gain.mutable_data().end(), 0.0);
  std::fill(last.bias.mutable_data().begin(), last.bias.mutable_data().end(), 0.0);
  oracle::Rng rng(2);
  Tensor a = oracle::random_tensor({2, 3, 16}, rng);
  Tensor y = mn.correct(a, oracle::random_tensor({2, 16}, rng));
  EXPECT_EQ(y.shape(), a.shape());
  EXPECT_EQ(y.values(), a.values());
}

TEST(MNCorrector, SameCorrectionForEveryAttribute) {
  nn::Rng wr(1);
  MNCorrector mn(16, wr);
  oracle::Rng rng(2);
  Tensor a = Tensor::zeros({2, 3, 16});
  auto y = oracle::rows(mn.correct(a, oracle::random_tensor({2, 16}, rng)));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 1; i < 3; ++i) EXPECT_EQ(y[b * 3 + i], y[b * 3]);
}

TEST(InteractionBlock, ZeroOutputProjectionIsResidual) {
  nn::Rng wr(1);
  InteractionBlock blk(16, 4, 8, wr);
  blk.mhca.out_proj.set_zero();
  oracle::Rng rng(2);
  Tensor a = oracle::random_tensor({2, 3, 16}, rng);
  EXPECT_EQ(blk(a, oracle::random_tensor({2, 8, 16}, rng)).values(), a.values());
}

TEST(InteractionBlock, AttentionRowsSumToOne) {
  nn::Rng wr(1);
  InteractionBlock blk(16, 4, 8, wr);
  oracle::Rng rng(2);
  for (std::size_t n : {3u, 4u}) {
    Tensor w;
    blk(oracle::random_tensor({2, n, 16}, rng), oracle::random_tensor({2, 8, 16}, rng), &w);
    for (const auto& r : oracle::rows(w)) {
      EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-6);
      for (double x : r) EXPECT_GE(x, 0.0);
    }
  }
}

TEST(InteractionBlock, NoCrossTargetLeakage) {
  nn::Rng wr(1);
  InteractionBlock blk(16, 4, 8, wr);
  oracle::Rng rng(2);
  Tensor a = oracle::random_tensor({2, 3, 16}, rng), v = oracle::random_tensor({2, 8, 16}, rng);
  auto base = oracle::rows(blk(a, v));
  auto vv = v.values();
  for (std::size_t i = 8 * 16; i < vv.size(); ++i) vv[i] += 1.0;  // perturb target 1 only
  auto moved = oracle::rows(blk(a, Tensor::constant(v.shape(), vv)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(moved[i], base[i]);
  EXPECT_NE(moved[3], base[3]);
}

TEST(WeightedFusion, EqualAttributesAndIdentityW2) {
  nn::Rng wr(1);
  WeightedFusion f(16, wr);
  f.w2.set_identity();
  oracle::Rng rng(2);
  auto e = oracle::row(oracle::random_tensor({1, 16}, rng), 0);
  std::vector<double> v;
  for (int i = 0; i < 3; ++i) v.insert(v.end(), e.begin(), e.end());
  Tensor y = f(Tensor::constant({1, 3, 16}, v));
  EXPECT_LE(oracle::max_abs_diff(y.values(), e), 1e-12);
}

TEST(WeightedFusion, SaturatedSoftmaxSelectsOneAttribute) {
  nn::Rng wr(1);
  WeightedFusion f(16, wr);
  f.w1.set_zero();
  f.w1.weight.mutable_data()[0] = 1.0;  // logit = first channel
  oracle::Rng rng(2);
  Tensor et = oracle::random_tensor({2, 3, 16}, rng, 0.1);
  auto v = et.values();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) v[(b * 3 + i) * 16] = i == b + 1 ? 20.0 : -20.0;
  et = Tensor::constant(et.shape(), v);
  Tensor w;
  Tensor y = f(et, &w);
  for (std::size_t b = 0; b < 2; ++b) {
    auto want = oracle::linear(oracle::row(et, b * 3 + b + 1), f.w2);
    EXPECT_LE(oracle::max_abs_diff(oracle::row(y, b), want), 1e-6);
  }
  for (const auto& r : oracle::rows(w)) {
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(WeightedFusion, WeightsAreAProperDistribution) {
  nn::Rng wr(1);
  WeightedFusion f(16, wr);
  oracle::Rng rng(3);
  Tensor w = f.weights(oracle::random_tensor({5, 4, 16}, rng));
  for (const auto& r : oracle::rows(w)) {
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-6);
    for (double x : r) {
      EXPECT_GT(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
  }
}

TEST(FusionVariants, WeightedDispatchIsExact) {
  nn::Rng r1(5), r2(5);
  BranchFusion bf(FusionStrategy::weighted, 3, 16, 4, r1);
  WeightedFusion wf(16, r2);
  oracle::Rng rng(2);
  Tensor et = oracle::random_tensor({2, 3, 16}, rng);
  EXPECT_EQ(bf(et).values(), wf(et).values());
}

TEST(FusionVariants, ShapesAndParsing) {
  nn::Rng wr(1);
  oracle::Rng rng(2);
  Tensor et = oracle::random_tensor({2, 3, 16}, rng);
  ConcatFusion cf(3, 16, wr);
  EXPECT_EQ(cf.map.in_features(), 48u);
  EXPECT_EQ(cf(et).shape(), (ag::Shape{2, 16}));
  SelfAttentionFusion sf(16, 4, wr);
  EXPECT_EQ(sf(et).shape(), (ag::Shape{2, 16}));
  AddInteraction ai(16, wr);
  ConcatInteraction ci(16, wr);
  Tensor pooled = oracle::random_tensor({2, 16}, rng);
  EXPECT_EQ(ai(et, pooled).shape(), et.shape());
  EXPECT_EQ(ci(et, pooled).shape(), et.shape());
  EXPECT_THROW(parse_fusion_strategy("mean"), std::invalid_argument);
  EXPECT_THROW(parse_interaction_strategy("film"), std::invalid_argument);
  for (auto s : {FusionStrategy::weighted, FusionStrategy::concat, FusionStrategy::self_attention})
    EXPECT_EQ(parse_fusion_strategy(to_string(s)), s);
  for (auto s : {InteractionStrategy::cross_attention, InteractionStrategy::concat, InteractionStrategy::add})
    EXPECT_EQ(parse_interaction_strategy(to_string(s)), s);
}

TEST(PromptModulator, BatchPermutationEquivariance) {
  oracle::Rng rng(2);
  const std::size_t b = 5;
  Tensor ee = oracle::random_tensor({b, 3, 16}, rng), ei = oracle::random_tensor({b, 4, 16}, rng),
         tok = oracle::random_tensor({b, 8, 16}, rng), pooled = oracle::random_tensor({b, 16}, rng),
         cls = oracle::random_tensor({b, 16}, rng);
  const std::vector<std::size_t> perm{2, 4, 0, 3, 1};
  for (auto fusion : {FusionStrategy::weighted, FusionStrategy::concat, FusionStrategy::self_attention})
    for (auto inter : {InteractionStrategy::cross_attention, InteractionStrategy::concat, InteractionStrategy::add}) {
      ModulatorOptions o;
      o.fusion = fusion;
      o.interaction = inter;
      nn::Rng wr(9);
      PromptModulator pm(16, o, wr);
      auto base = pm(ee, ei, tok, pooled, cls);
      auto p = pm(permute_rows(ee, perm), permute_rows(ei, perm), permute_rows(tok, perm), permute_rows(pooled, perm),
                  permute_rows(cls, perm));
      expect_rows_permuted(base.multimodal_explicit, p.multimodal_explicit, perm);
      expect_rows_permuted(base.multimodal_implicit, p.multimodal_implicit, perm);
    }
}

TEST(PromptModulator, ReducesToWeightedAttributeSelection) {
  ModulatorOptions o;
  o.mn_corrector = false;
  nn::Rng wr(3);
  PromptModulator pm(16, o, wr);
  pm.cross_attention.mhca.out_proj.set_zero();
  pm.fusion_explicit.weighted.w2.set_identity();
  pm.fusion_implicit.weighted.w2.set_identity();
  oracle::Rng rng(4);
  Tensor ee = oracle::random_tensor({2, 3, 16}, rng), ei = oracle::random_tensor({2, 4, 16}, rng);
  auto out = pm(ee, ei, oracle::random_tensor({2, 8, 16}, rng), oracle::random_tensor({2, 16}, rng),
                oracle::random_tensor({2, 16}, rng));
  auto [ae, ai] = pm.adapter(ee, ei);
  auto select = [](const Tensor& attrs, const WeightedFusion& f) {
    const std::size_t b = attrs.dim(0), n = attrs.dim(1);
    oracle::Mat out;
    for (std::size_t t = 0; t < b; ++t) {
      oracle::Vec logits;
      for (std::size_t i = 0; i < n; ++i) logits.push_back(oracle::linear(oracle::row(attrs, t * n + i), f.w1)[0]);
      auto w = oracle::softmax(logits);
      oracle::Vec m(attrs.dim(2), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < m.size(); ++c) m[c] += w[i] * oracle::row(attrs, t * n + i)[c];
      out.push_back(m);
    }
    return oracle::flat(out);
  };
  EXPECT_LE(oracle::max_abs_diff(out.multimodal_explicit.values(), select(ae, pm.fusion_explicit.weighted)), 1e-9);
  EXPECT_LE(oracle::max_abs_diff(out.multimodal_implicit.values(), select(ai, pm.fusion_implicit.weighted)), 1e-9);
}

TEST(PromptModulator, CorrectorToggleKeepsOtherInitialWeights) {
  ModulatorOptions on, off;
  off.mn_corrector = false;
  nn::Rng r1(3), r2(3);
  PromptModulator a(16, on, r1), b(16, off, r2);
  nn::ParamList pa, pb;
  a.collect(pa, "m");
  b.collect(pb, "m");
  std::map<std::string, std::vector<double>> mb;
  for (auto& p : pb) mb[p.name] = p.tensor.values();
  std::size_t shared = 0;
  for (auto& p : pa)
    if (mb.count(p.name)) {
      EXPECT_EQ(p.tensor.values(), mb[p.name]) << p.name;
      ++shared;
    }
  EXPECT_EQ(shared, pb.size());
}

// ---------------------------------------------------------------------------
// feature augmentor

TEST(Refiner, ShapesAndIdentityConfiguration) {
  nn::Rng wr(1);
  RefinerStack r(16, wr);
  oracle::Rng rng(2);
  Tensor x = oracle::random_tensor({2, 8, 16}, rng);
  RefinerOutputs o = r(x);
  EXPECT_EQ(o.tokens.shape(), (ag::Shape{2, 8, 16}));
  EXPECT_EQ(o.pooled.shape(), (ag::Shape{2, 16}));
  r.set_identity();
  EXPECT_EQ(r(x).tokens.values(), x.values());
}

TEST(VFAdapter, ZeroWeightIsIdentity) {
  nn::Rng wr(1);
  VFAdapter a(16, wr);
  a.w.set_zero();
  oracle::Rng rng(2);
  Tensor e = oracle::random_tensor({3, 16}, rng);
  Tensor y = a(e);
  EXPECT_EQ(y.shape(), e.shape());
  EXPECT_EQ(y.values(), e.values());
}

TEST(DisScore, HandCases) {
  Tensor same = Tensor::constant({3, 2}, {1, 2, 1, 2, 1, 2});
  const Tensor d0 = dis_score(same);
  for (double v : d0.data()) EXPECT_NEAR(v, 0.0, 1e-12);
  Tensor ortho = Tensor::constant({3, 3}, {2, 0, 0, 0, 3, 0, 0, 0, 1});
  auto d = oracle::rows(dis_score(ortho));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(d[i][j], i == j ? 0.0 : 1.0, 1e-12);
  Tensor anti = Tensor::constant({2, 2}, {1, 1, -2, -2});
  EXPECT_NEAR(dis_score(anti).values()[1], 2.0, 1e-9);
}

TEST(DisScore, SymmetricZeroDiagonalBounded) {
  oracle::Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    auto d = oracle::rows(dis_score(oracle::random_tensor({9, 6}, rng)));
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_EQ(d[i][i], 0.0);
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_LT(std::abs(d[i][j] - d[j][i]), 1e-6);
        EXPECT_GE(d[i][j], 0.0);
        EXPECT_LE(d[i][j], 2.0);
      }
    }
  }
}

TEST(TopK, CraftedRowAndClamping) {
  std::vector<double> row{0, .3, .9, .5};
  EXPECT_EQ(top_k_row(row, 0, 2), (std::vector<std::size_t>{2, 3}));
  oracle::Rng rng(1);
  Tensor e = oracle::random_tensor({3, 4}, rng);
  TopKSelection s = top_k_select(dis_score(e), e, 5);
  EXPECT_EQ(s.k, 2u);
  EXPECT_EQ(s.scores.shape(), (ag::Shape{3, 2}));
  EXPECT_EQ(s.samples.shape(), (ag::Shape{3, 2, 4}));
  EXPECT_THROW(top_k_select(dis_score(e), e, 0), std::invalid_argument);
}

TEST(TopK, FullSelectionIsDescendingOrder) {
  oracle::Rng rng(2);
  Tensor e = oracle::random_tensor({7, 5}, rng);
  Tensor d = dis_score(e);
  TopKSelection s = top_k_select(d, e, 6);
  auto D = oracle::rows(d);
  for (std::size_t i = 0; i < 7; ++i) {
    ASSERT_EQ(s.idx[i].size(), 6u);
    EXPECT_EQ(std::count(s.idx[i].begin(), s.idx[i].end(), i), 0);
    for (std::size_t t = 1; t < 6; ++t) EXPECT_GE(D[i][s.idx[i][t - 1]], D[i][s.idx[i][t]]);
  }
}

TEST(TopK, RandomMatchesBruteForce) {
  oracle::Rng rng(3);
  Tensor e = oracle::random_tensor({16, 8}, rng);
  Tensor d = dis_score(e);
  TopKSelection s = top_k_select(d, e, 5);
  auto D = oracle::rows(d);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(s.idx[i], oracle::top_k_bruteforce(D[i], i, 5));
}

TEST(Aggregator, SingleTargetHasZeroDifference) {
  nn::Rng wr(1);
  TopKAggregator agg(16, 5, 0.2, wr);
  for (double w : agg.w_dim.data()) EXPECT_EQ(w, 1.0);
  oracle::Rng rng(2);
  Tensor e = oracle::random_tensor({1, 16}, rng);
  oracle::Vec joined(16, 0.0);
  auto er = oracle::row(e, 0);
  joined.insert(joined.end(), er.begin(), er.end());
  auto want = oracle::linear(joined, agg.out);
  for (std::size_t c = 0; c < 16; ++c) want[c] = 0.2 * want[c] + er[c];
  EXPECT_LE(oracle::max_abs_diff(agg(e).values(), want), 1e-12);
}

TEST(Aggregator, EqualScoresGiveUniformWeights) {
  nn::Rng wr(1);
  TopKAggregator agg(4, 3, 0.2, wr);
  oracle::Rng rng(2);
  TopKSelection sel;
  sel.k = 3;
  sel.scores = Tensor::full({1, 3}, 0.7);
  sel.samples = oracle::random_tensor({1, 3, 4}, rng);
  auto diff = agg.difference(sel, 1, 4).values();
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t t = 0; t < 3; ++t) mean += sel.samples.data()[t * 4 + c] / 3.0;
    EXPECT_NEAR(diff[c], mean, 1e-12);
  }
}

TEST(Aggregator, DifferenceScalesWithChannelWeights) {
  nn::Rng wr(1);
  TopKAggregator agg(8, 3, 0.2, wr);
  oracle::Rng rng(2);
  Tensor e = oracle::random_tensor({6, 8}, rng);
  auto sel = top_k_select(dis_score(e), e, 3);
  auto d1 = agg.difference(sel, 6, 8).values();
  for (auto& w : agg.w_dim.mutable_data()) w *= 2.0;
  auto d2 = agg.difference(sel, 6, 8).values();
  for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d2[i], 2.0 * d1[i]);
}

TEST(FeatureAugmentor, BatchPermutationEquivariance) {
  nn::Rng wr(1);
  FeatureAugmentor fa(16, 5, 0.2, wr);
  oracle::Rng rng(2);
  Tensor x = oracle::random_tensor({9, 8, 16}, rng);
  const std::vector<std::size_t> perm{8, 3, 0, 5, 1, 7, 2, 6, 4};
  auto a = fa(x), b = fa(permute_rows(x, perm));
  expect_rows_permuted(a.embedding, b.embedding, perm, 1e-12);
  expect_rows_permuted(a.tokens, b.tokens, perm, 1e-12);
}

// ---------------------------------------------------------------------------
// assembled model

TEST(Model, ForwardShapes) {
  EpipModel model;
  Batch b = first_batch();
  ModelOutputs o = model.forward(b.pixels, b.prompts);
  EXPECT_EQ(o.multimodal_explicit.shape(), (ag::Shape{16, 16}));
  EXPECT_EQ(o.multimodal_implicit.shape(), (ag::Shape{16, 16}));
  EXPECT_EQ(o.visual.shape(), (ag::Shape{16, 16}));
  EXPECT_EQ(o.pseudo_tokens.size(), 2u);
  for (const auto& [l, t] : o.pseudo_tokens) EXPECT_EQ(t.shape(), (ag::Shape{16, 16}));
}

TEST(Model, PseudoTokensVaryAcrossTargets) {
  EpipModel model;
  Batch b = first_batch();
  ModelOutputs o = model.forward(b.pixels, b.prompts);
  for (const auto& [l, t] : o.pseudo_tokens) {
    auto r = oracle::rows(t);
    double var = 0;
    for (std::size_t c = 0; c < r[0].size(); ++c) {
      double m = 0, s = 0;
      for (const auto& row : r) m += row[c] / double(r.size());
      for (const auto& row : r) s += (row[c] - m) * (row[c] - m);
      var += s;
    }
    EXPECT_GT(var, 1e-8) << "layer " << l;
  }
}

TEST(Model, OptimizerCoverageAudit) {
  EpipModel model;
  SGD opt(model.parameters(true), 0.9, 1e-4);
  std::set<const ag::Node*> seen;
  std::set<std::string> names;
  for (const auto& p : opt.params()) {
    EXPECT_TRUE(seen.insert(p.tensor.node()).second) << "duplicate tensor " << p.name;
    EXPECT_TRUE(names.insert(p.name).second) << "duplicate name " << p.name;
    EXPECT_TRUE(p.tensor.requires_grad());
  }
  std::size_t frozen = 0;
  for (const auto& p : model.parameters()) {
    const bool text = p.name.rfind("text.", 0) == 0;
    EXPECT_EQ(seen.count(p.tensor.node()), text ? 0u : 1u) << p.name;
    frozen += text;
  }
  EXPECT_GT(frozen, 0u);
  for (const char* group : {"visual.", "soft_prompt.", "ti_net.", "modulator.adapter", "modulator.mn_corrector",
                            "modulator.interaction", "modulator.fusion_explicit", "modulator.fusion_implicit",
                            "augmentor.refiner", "augmentor.vf_adapter", "augmentor.topk"})
    EXPECT_TRUE(std::any_of(names.begin(), names.end(), [&](const std::string& n) { return n.rfind(group, 0) == 0; }))
        << group;
}

TEST(Model, NoDeadParameters) {
  EpipModel model;
  TrainConfig cfg;
  auto params = model.parameters(true);
  std::vector<double> reach(params.size(), 0.0);
  nn::Rng rng = epoch_rng(cfg.seed, 0);
  auto batches = pk_batches(toy_data().train, cfg.identities_per_batch(), cfg.instances, rng);
  for (std::size_t s = 0; s < std::min<std::size_t>(4, batches.size()); ++s) {
    Batch b = make_batch(toy_data().train, batches[s], 0, 0, nullptr);
    for (auto& p : params) p.tensor.zero_grad();
    ModelOutputs o = model.forward(b.pixels, b.prompts);
    ag::backward(total_loss(o.multimodal_explicit, o.multimodal_implicit, o.visual, b.ids, cfg.loss).total);
    for (std::size_t k = 0; k < params.size(); ++k)
      for (double g : params[k].tensor.grad()) reach[k] = std::max(reach[k], std::abs(g));
  }
  for (std::size_t k = 0; k < params.size(); ++k) EXPECT_GT(reach[k], 0.0) << params[k].name;
}

TEST(Model, GradientReachesSoftPromptAndTINet) {
  EpipModel model;
  LossConfig lc;
  Batch b = first_batch();
  auto loss = [&] {
    ModelOutputs o = model.forward(b.pixels, b.prompts);
    return total_loss(o.multimodal_explicit, o.multimodal_implicit, o.visual, b.ids, lc).total;
  };
  ag::backward(loss());
  std::vector<Tensor> targets{model.soft_prompt.tokens, model.ti_net.fc1.weight, model.ti_net.proj.weight};
  for (auto& t : targets) {
    auto g = t.grad();
    ASSERT_FALSE(g.empty());
    const std::size_t i = std::size_t(std::max_element(g.begin(), g.end(), [](double a, double c) {
                                        return std::abs(a) < std::abs(c);
                                      }) -
                                      g.begin());
    const double analytic = g[i];
    const double h = 1e-5;
    auto x = t.mutable_data();
    const double orig = x[i];
    double up, dn;
    {
      ag::NoGradGuard guard;
      x[i] = orig + h;
      up = loss().item();
      x[i] = orig - h;
      dn = loss().item();
      x[i] = orig;
    }
    const double numeric = (up - dn) / (2 * h);
    EXPECT_GT(std::abs(analytic), 0.0);
    EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)), 1e-3)
        << "analytic " << analytic << " numeric " << numeric;
  }
}

TEST(Model, ClsPerLayerUsesMatchingVisualBlock) {
  EncoderConfig cfg;
  cfg.n_vis_layers = 3;
  cfg.inject_layers = {2, 5};
  nn::Rng wr(1);
  ToyVisualEncoder enc(cfg, wr);
  oracle::Rng rng(2);
  std::vector<double> px(2 * kPixelsPerCrop);
  for (auto& v : px) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  VisualOutputs o = enc.forward(Tensor::constant({2, std::size_t(kPooledHeight * kPooledWidth), 3}, px));
  EXPECT_NE(o.cls_per_layer.at(2).values(), o.cls_per_layer.at(5).values());
}
