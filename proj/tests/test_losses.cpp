#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace epiptrack;

namespace {

Tensor basis(std::initializer_list<int> axes, std::size_t d = 4) {
  std::vector<double> v;
  for (int a : axes) {
    std::vector<double> r(d, 0.0);
    r[std::size_t(a)] = 1.0;
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor::constant({axes.size(), d}, v);
}

}  // namespace

TEST(ContrastiveLoss, SameIdentityPairIsZero) {
  oracle::Rng rng(1);
  Tensor m = oracle::random_tensor({2, 5}, rng), v = oracle::random_tensor({2, 5}, rng);
  EXPECT_NEAR(contrastive_loss(m, v, {3, 3}, {}).item(), 0.0, 1e-12);
}

TEST(ContrastiveLoss, HandExample) {
  LossConfig c;
  c.tau = 1.0;
  Tensor m = Tensor::constant({2, 1}, {1, -1}), v = Tensor::constant({2, 1}, {1, -1});
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0)));
  EXPECT_NEAR(contrastive_loss(m, v, {1, 2}, c).item(), want, 1e-12);
  EXPECT_NEAR(want, 0.1269, 1e-4);
}

TEST(ContrastiveLoss, SampleWithoutPositive) {
  LossConfig c;
  c.include_self_positive = false;
  oracle::Rng rng(2);
  Tensor m = oracle::random_tensor({3, 4}, rng), v = oracle::random_tensor({3, 4}, rng);
  // id 9 has no partner once self is excluded
  const double kept = contrastive_loss(m, v, {1, 1, 9}, c).item();
  EXPECT_TRUE(std::isfinite(kept));
  c.exclude_no_positive = false;
  EXPECT_THROW(contrastive_loss(m, v, {1, 1, 9}, c), std::exception);
}

TEST(TripletLoss, SatisfiedMarginIsZero) {
  // positives identical, negatives orthogonal
  Tensor m = basis({0, 0, 1, 1}), v = basis({0, 0, 1, 1});
  EXPECT_NEAR(triplet_loss(m, v, {1, 1, 2, 2}, {}).item(), 0.0, 1e-9);
}

TEST(TripletLoss, ViolatedMarginHingeArithmetic) {
  // positives orthogonal (d=1), negatives identical (d=0)
  Tensor m = basis({0, 1}), v = basis({1, 0});
  EXPECT_NEAR(triplet_loss(m, v, {1, 2}, {}).item(), 1.3, 1e-9);
}

TEST(TripletLoss, ZeroForCoincidentOrthogonalIdentities) {
  for (double margin : {0.0, 0.3, 0.7, 1.0}) {
    LossConfig c;
    c.margin = margin;
    Tensor m = basis({0, 0, 1, 2, 2, 3}), v = basis({0, 0, 1, 2, 2, 3});
    EXPECT_NEAR(triplet_loss(m, v, {1, 1, 2, 3, 3, 4}, c).item(), 0.0, 1e-9) << margin;
  }
}

TEST(SimilarityLoss, MatchedDistributionsNearZero) {
  Tensor m = Tensor::full({4, 3}, 0.5), v = Tensor::full({4, 3}, 0.5);
  EXPECT_NEAR(similarity_distribution_loss(m, v, {2, 2, 2, 2}, {}).item(), 0.0, 1e-5);
}

TEST(SimilarityLoss, MismatchIsPenalizedAtEpsScale) {
  LossConfig c;
  Tensor m = basis({0, 1}), v = basis({1, 0});
  const double l = similarity_distribution_loss(m, v, {1, 2}, c).item();
  EXPECT_GT(l, -std::log(c.eps));
}

TEST(TotalLoss, TermFlagsSelectSingleTerms) {
  oracle::Rng rng(3);
  auto ids = oracle::random_ids(8, 3, rng);
  Tensor a = oracle::random_tensor({8, 6}, rng), b = oracle::random_tensor({8, 6}, rng),
         v = oracle::random_tensor({8, 6}, rng);
  const LossBreakdown all = total_loss(a, b, v, ids, {});
  EXPECT_NEAR(all.total.item(), all.con + all.tri + all.sim, 1e-12);
  for (int k = 0; k < 3; ++k) {
    LossConfig c;
    c.terms = {k == 0, k == 1, k == 2};
    const double want = k == 0 ? all.con : k == 1 ? all.tri : all.sim;
    EXPECT_NEAR(total_loss(a, b, v, ids, c).total.item(), want, 1e-12) << k;
  }
}

TEST(TotalLoss, ConOnlyRowIsExpressible) {
  const auto grid = loss_term_grid();
  ASSERT_EQ(grid.size(), 4u);
  ASSERT_TRUE(grid[0].terms);
  EXPECT_TRUE(grid[0].terms->con);
  EXPECT_FALSE(grid[0].terms->tri);
  EXPECT_FALSE(grid[0].terms->sim);
  EXPECT_TRUE(grid[3].terms->tri && grid[3].terms->sim);
}

TEST(Losses, NonNegativeAndPermutationInvariant) {
  oracle::Rng rng(4);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 4 + std::size_t(trial % 9);
    auto ids = oracle::random_ids(n, 3, rng);
    Tensor m = oracle::random_tensor({n, 5}, rng), v = oracle::random_tensor({n, 5}, rng);
    LossConfig c;
    const double con = contrastive_loss(m, v, ids, c).item(), tri = triplet_loss(m, v, ids, c).item(),
                 sim = similarity_distribution_loss(m, v, ids, c).item();
    EXPECT_GE(con, 0.0);
    EXPECT_GE(tri, 0.0);
    EXPECT_GE(sim, -1e-4);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> pids;
    for (auto i : perm) pids.push_back(ids[i]);
    Tensor pm = ag::index_select(m, 0, perm), pv = ag::index_select(v, 0, perm);
    EXPECT_NEAR(contrastive_loss(pm, pv, pids, c).item(), con, 1e-6);
    EXPECT_NEAR(triplet_loss(pm, pv, pids, c).item(), tri, 1e-6);
    EXPECT_NEAR(similarity_distribution_loss(pm, pv, pids, c).item(), sim, 1e-6);
  }
}

TEST(Losses, InputValidation) {
  Tensor m = Tensor::zeros({3, 4});
  EXPECT_THROW(contrastive_loss(m, Tensor::zeros({3, 5}), {1, 1, 2}, {}), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(m, m, {1, 2}, {}), std::invalid_argument);
  LossConfig bad;
  bad.tau = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad.tau = 0.1;
  bad.margin = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Losses, AnalyticGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {21u, 22u, 23u})
    for (const auto& c : oracle::gradient_checks(seed)) EXPECT_TRUE(c.ok()) << c.name << " seed " << seed << ": " << c.error;
}
