#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"

using namespace hyperspod;

namespace {

double brute_force_min(const CostMatrix& c) {
  std::vector<std::size_t> cols(c.cols);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  // every injective rows -> cols map appears as the prefix of some permutation
  do {
    double s = 0.0;
    for (std::size_t r = 0; r < c.rows; ++r) s += c(r, cols[r]);
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

BBox random_box(Rng& rng) {
  const double w = rng.uniform(0.02, 0.3), h = rng.uniform(0.02, 0.3);
  return {rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
}

}  // namespace

TEST(Hungarian, MatchesBruteForceOnIntegerCosts) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    const std::size_t c = r + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(8 - std::min<std::size_t>(r, 8))));
    CostMatrix m{r, c, std::vector<double>(r * c)};
    for (double& v : m.values) v = static_cast<double>(rng.uniform_int(0, 50));
    const auto a = hungarian(m);
    ASSERT_EQ(a.size(), r);
    std::vector<std::size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_EQ(assignment_cost(m, a), brute_force_min(m));
  }
}

TEST(Hungarian, SmallCasesAndInfeasible) {
  const CostMatrix m{2, 2, {1, 2, 2, 1}};
  EXPECT_EQ(hungarian(m), (std::vector<std::size_t>{0, 1}));
  const CostMatrix anti{2, 2, {5, 1, 1, 5}};
  EXPECT_EQ(hungarian(anti), (std::vector<std::size_t>{1, 0}));
  try {
    hungarian(CostMatrix{3, 2, std::vector<double>(6, 0.0)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::infeasible);
  }
}

TEST(Costs, HandOracles) {
  const auto a = BBox::from_corners(0, 0, 2, 2), b = BBox::from_corners(1, 1, 3, 3);
  EXPECT_NEAR(giou(a, b), -5.0 / 63.0, 1e-12);
  EXPECT_NEAR(giou(BBox::from_corners(0, 0, 1, 1), BBox::from_corners(2, 0, 3, 1)), -1.0 / 3.0, 1e-12);
  EXPECT_NEAR(giou(a, a), 1.0, 1e-12);
  EXPECT_NEAR(focal_cls_cost(0.5), 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_cls_cost(1.0), 0.0, 1e-12);
  EXPECT_NEAR(l1_cost({0.5, 0.5, 0.2, 0.2}, {0.6, 0.4, 0.1, 0.3}), 0.4, 1e-12);
  const auto tw = LossWeights::training();
  EXPECT_EQ(tw.cls, 1.0);
  EXPECT_EQ(tw.l1, 5.0);
  EXPECT_EQ(tw.giou, 2.0);
}

TEST(HybridAssign, DynamicCapOnCrowdedGt) {
  const BBox g{0.5, 0.5, 0.2, 0.2};
  std::vector<Prediction> preds;
  for (int i = 0; i < 12; ++i) {
    // width scaled so the IoU is 0.99 for every prediction
    preds.push_back({{0.5, 0.5, 0.2 * std::sqrt(0.99), 0.2 * std::sqrt(0.99)}, {0.3 + 0.01 * i}});
  }
  const auto r = hybrid_assign({{g, 0}}, preds);
  std::size_t forced = 0, dynamic = 0;
  for (const auto& p : r.pairs) (p.origin == PairOrigin::forced ? forced : dynamic)++;
  EXPECT_EQ(forced, 1u);
  EXPECT_EQ(dynamic, 9u);
  // forced pair takes the most confident prediction when boxes tie
  EXPECT_EQ(r.pairs.front().pred, 11u);
}

TEST(HybridAssign, InvariantsOnRandomScenes) {
  Rng rng(2);
  for (int t = 0; t < 300; ++t) {
    const auto ng = static_cast<std::size_t>(rng.uniform_int(1, 5));
    std::vector<GroundTruth> gts;
    for (std::size_t g = 0; g < ng; ++g) gts.push_back({random_box(rng), static_cast<int>(rng.uniform_int(0, 1))});
    std::vector<Prediction> preds;
    for (int p = 0; p < 40; ++p) {
      BBox b = random_box(rng);
      if (p % 3 == 0) {
        const BBox& src = gts[static_cast<std::size_t>(p) % ng].box;
        b = {src.cx + rng.normal(0, 0.0005), src.cy + rng.normal(0, 0.0005), src.w, src.h};
      }
      preds.push_back({b, {rng.uniform(), rng.uniform()}});
    }
    const auto r = hybrid_assign(gts, preds);
    std::vector<int> forced(ng, 0), dynamic(ng, 0);
    std::vector<int> used(preds.size(), 0);
    for (const auto& p : r.pairs) {
      ++used[p.pred];
      if (p.origin == PairOrigin::forced) {
        ++forced[p.gt];
      } else {
        ++dynamic[p.gt];
        EXPECT_GT(p.iou, defaults::kDynamicIouThreshold);
      }
    }
    for (std::size_t g = 0; g < ng; ++g) {
      EXPECT_EQ(forced[g], 1);
      EXPECT_LE(dynamic[g], defaults::kDynamicCap);
    }
    for (int u : used) EXPECT_LE(u, 1);
  }
  EXPECT_THROW(hybrid_assign({{random_box(rng), 0}, {random_box(rng), 0}}, {{random_box(rng), {0.5}}}), Error);
}

TEST(Ccdn, OffsetsFallInTheirRegions) {
  Rng rng(3);
  std::vector<BBox> gts;
  for (int i = 0; i < 50; ++i) gts.push_back(random_box(rng));
  const CcdnParams p;
  const auto qs = ccdn_generate(gts, p, rng);
  ASSERT_EQ(qs.size(), 2 * p.pairs * gts.size());
  for (const auto& q : qs) {
    const BBox& b = gts[q.gt_index];
    const double hx = 0.5 * p.tau1 * b.w, hy = 0.5 * p.tau1 * b.h;
    const double ax = std::abs(q.offset_x), ay = std::abs(q.offset_y);
    if (q.polarity == Polarity::positive) {
      EXPECT_LT(ax, hx);
      EXPECT_LT(ay, hy);
    } else {
      EXPECT_GE(ax, hx);
      EXPECT_GE(ay, hy);
      EXPECT_LE(ax, 2 * hx);
      EXPECT_LE(ay, 2 * hy);
    }
    EXPECT_GE(q.box.w, std::max(p.min_width, b.w - p.tau2 * b.w) - 1e-12);
    EXPECT_LE(q.box.w, b.w + p.tau2 * b.w + 1e-12);
    for (double v : {q.box.cx, q.box.cy, q.box.w, q.box.h}) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
  EXPECT_THROW(ccdn_generate(gts, CcdnParams{0.0}, rng), Error);
}

TEST(Cdn, PositivesStayCloserThanNegatives) {
  Rng rng(4);
  const std::vector<BBox> gts{{0.5, 0.5, 0.2, 0.2}};
  const auto qs = cdn_generate(gts, 500, 0.4, rng);
  ASSERT_EQ(qs.size(), 1000u);
  for (const auto& q : qs) {
    const double d = std::max({std::abs(q.box.x0() - 0.4), std::abs(q.box.x1() - 0.6), std::abs(q.box.y0() - 0.4),
                               std::abs(q.box.y1() - 0.6)});
    if (q.polarity == Polarity::positive) EXPECT_LE(d, 0.04 + 1e-9);
    else EXPECT_LE(d, 0.08 + 1e-9);
  }
}

TEST(Nms, DuplicatesDisjointAndOrder) {
  const Detection a{{5, 5, 2, 2}, 1, 0.9}, dup{{5, 5, 2, 2}, 1, 0.5}, far{{20, 20, 2, 2}, 1, 0.7},
      other{{5, 5, 2, 2}, 2, 0.6};
  const auto kept = nms({dup, far, a});
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0], a);
  EXPECT_EQ(kept[1], far);
  EXPECT_EQ(nms({a, far, dup}), kept);
  const auto pc = nms_per_class({a, dup, other, far});
  ASSERT_EQ(pc.size(), 3u);
  EXPECT_EQ(pc[0], a);
  EXPECT_EQ(pc[1], far);
  EXPECT_EQ(pc[2], other);
  // touching boxes have IoU 0 and survive the 0.01 threshold
  EXPECT_EQ(nms({{{1, 1, 2, 2}, 1, 0.9}, {{3, 1, 2, 2}, 1, 0.8}}).size(), 2u);
}
