#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

using namespace hyperspod;

namespace {

// Union-find over 8-neighbours; independent of the breadth-first labeler.
int union_find_count(const BinaryMask& m) {
  const std::size_t n = m.bits.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c) {
      if (!m.at(r, c)) continue;
      // previously visited neighbours: W, NW, N, NE
      const int nb[4][2] = {{0, -1}, {-1, -1}, {-1, 0}, {-1, 1}};
      for (const auto& d : nb) {
        const long rr = static_cast<long>(r) + d[0], cc = static_cast<long>(c) + d[1];
        if (rr < 0 || cc < 0 || cc >= static_cast<long>(m.width)) continue;
        if (m.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)))
          parent[find(r * m.width + c)] = find(static_cast<std::size_t>(rr) * m.width + static_cast<std::size_t>(cc));
      }
    }
  int count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (m.bits[i] && find(i) == i) ++count;
  return count;
}

BinaryMask random_mask(std::size_t h, std::size_t w, double p, Rng& rng) {
  BinaryMask m = BinaryMask::empty(h, w, 1);
  for (auto& b : m.bits) b = rng.uniform() < p;
  return m;
}

ScoreMap random_map(std::size_t h, std::size_t w, Rng& rng) {
  ScoreMap s{h, w, 1, std::vector<float>(h * w)};
  for (auto& v : s.scores) v = static_cast<float>(rng.uniform(-5.0, 5.0));
  return s;
}

}  // namespace

TEST(MaskToObjects, EmptyAndDiagonal) {
  EXPECT_TRUE(mask_to_objects(BinaryMask::empty(4, 4, 2)).empty());
  BinaryMask m = BinaryMask::empty(4, 4, 2);
  m.set(1, 1);
  m.set(2, 2);
  const auto objs = mask_to_objects(m);
  ASSERT_EQ(objs.size(), 1u);
  EXPECT_EQ(objs[0].box, BBox::from_pixel_range(1, 1, 2, 2));
  EXPECT_EQ(objs[0].box, (BBox{2.0, 2.0, 2.0, 2.0}));
  EXPECT_EQ(objs[0].class_id, 2);
  EXPECT_EQ(mask_to_objects(m, Connectivity::four).size(), 2u);
}

TEST(MaskToObjects, ComponentCountMatchesUnionFind) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const auto m = random_mask(16, 16, rng.uniform(0.05, 0.6), rng);
    const auto lab = label_components(m);
    EXPECT_EQ(lab.count, union_find_count(m));
    // ids contiguous and every labeled pixel is set
    std::vector<bool> used(static_cast<std::size_t>(lab.count) + 1, false);
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      EXPECT_EQ(lab.labels[i] != 0, m.bits[i] != 0);
      used[static_cast<std::size_t>(lab.labels[i])] = true;
    }
    for (int k = 1; k <= lab.count; ++k) EXPECT_TRUE(used[static_cast<std::size_t>(k)]);
  }
}

TEST(MaskToObjects, BoxesAreTight) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto m = random_mask(12, 9, 0.2, rng);
    const auto lab = label_components(m);
    const auto objs = mask_to_objects(m);
    ASSERT_EQ(objs.size(), static_cast<std::size_t>(lab.count));
    for (std::size_t k = 0; k < objs.size(); ++k) {
      int c0 = 99, r0 = 99, c1 = -1, r1 = -1;
      for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t c = 0; c < 9; ++c)
          if (lab.labels[r * 9 + c] == static_cast<int>(k) + 1) {
            c0 = std::min(c0, static_cast<int>(c));
            c1 = std::max(c1, static_cast<int>(c));
            r0 = std::min(r0, static_cast<int>(r));
            r1 = std::max(r1, static_cast<int>(r));
          }
      EXPECT_EQ(objs[k].box, BBox::from_pixel_range(c0, r0, c1, r1));
    }
  }
}

TEST(ScoresToDetections, AllPassAndTopPass) {
  Rng rng(3);
  const auto map = random_map(6, 7, rng);
  const auto all = scores_to_detections(map, 0.0);
  ASSERT_EQ(all.detections.size(), 1u);
  EXPECT_DOUBLE_EQ(all.detections[0].confidence, 1.0);
  EXPECT_EQ(all.detections[0].box, BBox::from_pixel_range(0, 0, 6, 5));

  const auto top = scores_to_detections(map, 1.0);
  ASSERT_EQ(top.detections.size(), 1u);
  const auto arg = static_cast<std::size_t>(std::max_element(map.scores.begin(), map.scores.end()) - map.scores.begin());
  const int r = static_cast<int>(arg / 7), c = static_cast<int>(arg % 7);
  EXPECT_EQ(top.detections[0].box, BBox::from_pixel_range(c, r, c, r));
}

TEST(ScoresToDetections, TwoBlobsHandOracle) {
  ScoreMap m{5, 5, 3, std::vector<float>(25, 0.0f)};
  auto set = [&](int r, int c, float v) { m.scores[static_cast<std::size_t>(r * 5 + c)] = v; };
  set(0, 0, 1.0f);
  set(0, 1, 0.6f);
  set(4, 3, 0.8f);
  set(4, 4, 0.7f);
  const auto res = scores_to_detections(m, 0.5);
  ASSERT_EQ(res.detections.size(), 2u);
  EXPECT_DOUBLE_EQ(res.detections[0].confidence, 1.0);
  EXPECT_NEAR(res.detections[1].confidence, 0.8, 1e-7);
  EXPECT_EQ(res.detections[0].box, BBox::from_pixel_range(0, 0, 1, 0));
  EXPECT_EQ(res.detections[1].box, BBox::from_pixel_range(3, 4, 4, 4));
  EXPECT_EQ(res.detections[1].class_id, 3);
}

TEST(ScoresToDetections, FlatMapYieldsNothing) {
  const ScoreMap m{3, 3, 1, std::vector<float>(9, 2.5f)};
  const auto res = scores_to_detections(m, 0.5);
  EXPECT_TRUE(res.flat);
  EXPECT_TRUE(res.detections.empty());
}

TEST(ScoresToDetections, HigherThresholdOnlyPrunes) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto map = random_map(10, 10, rng);
    const double t1 = rng.uniform(0.0, 0.8), t2 = t1 + rng.uniform(0.01, 0.2);
    const auto lo = scores_to_detections(map, t1).detections;
    for (const auto& d : scores_to_detections(map, t2).detections) {
      const bool inside = std::any_of(lo.begin(), lo.end(), [&](const Detection& e) {
        return contains(e.box, d.box) && e.confidence >= d.confidence;
      });
      EXPECT_TRUE(inside);
    }
  }
}

TEST(BestSegThreshold, PerfectAndInvertedMaps) {
  Rng rng(5);
  auto gt = random_mask(8, 8, 0.3, rng);
  gt.set(0, 0);
  gt.set(7, 7, false);
  ScoreMap perfect{8, 8, 1, {}}, inverted{8, 8, 1, {}};
  for (auto b : gt.bits) {
    perfect.scores.push_back(b ? 1.0f : 0.0f);
    inverted.scores.push_back(b ? 0.0f : 1.0f);
  }
  const auto p = best_seg_threshold(perfect, gt);
  EXPECT_DOUBLE_EQ(p.iou, 1.0);
  EXPECT_DOUBLE_EQ(p.threshold, 1.0);
  const auto q = best_seg_threshold(inverted, gt);
  EXPECT_DOUBLE_EQ(q.threshold, 0.0);
  EXPECT_DOUBLE_EQ(q.iou, static_cast<double>(gt.count()) / 64.0);
}

TEST(BestSegThreshold, MatchesBruteForceScan) {
  Rng rng(6);
  for (int t = 0; t < 40; ++t) {
    const auto map = random_map(9, 11, rng);
    auto gt = random_mask(9, 11, 0.2, rng);
    gt.set(4, 4);
    const double lo = *std::min_element(map.scores.begin(), map.scores.end());
    const double hi = *std::max_element(map.scores.begin(), map.scores.end());
    double best = -1.0, best_t = 0.0;
    for (int s = 0; s <= 100; ++s) {
      const double thr = s / 100.0;
      int inter = 0, uni = 0;
      for (std::size_t i = 0; i < gt.bits.size(); ++i) {
        const bool p = (map.scores[i] - lo) / (hi - lo) >= thr;
        inter += p && gt.bits[i];
        uni += p || gt.bits[i];
      }
      const double iou = static_cast<double>(inter) / uni;
      if (iou >= best) best = iou, best_t = thr;
    }
    const auto r = best_seg_threshold(map, gt);
    EXPECT_DOUBLE_EQ(r.iou, best);
    EXPECT_DOUBLE_EQ(r.threshold, best_t);
  }
}

TEST(BestSegThreshold, EmptyGtAndPooling) {
  Rng rng(7);
  const auto map = random_map(4, 4, rng);
  try {
    best_seg_threshold(map, BinaryMask::empty(4, 4, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_gt);
  }
  auto gt = random_mask(4, 4, 0.4, rng);
  gt.set(1, 1);
  const auto single = best_seg_threshold(map, gt);
  const auto pooled = best_seg_threshold_pooled({map}, {gt});
  EXPECT_EQ(single.iou, pooled.iou);
  EXPECT_EQ(single.threshold, pooled.threshold);
  // An image with an empty mask still contributes false positives.
  EXPECT_NO_THROW(best_seg_threshold_pooled({map, map}, {gt, BinaryMask::empty(4, 4, 1)}));
}

TEST(SelectTopK, MatchesSortOracle) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    auto map = random_map(6, 6, rng);
    for (auto& v : map.scores) v = std::round(v);  // force ties
    const std::size_t k = 7;
    std::vector<std::pair<float, std::size_t>> keyed;
    for (std::size_t i = 0; i < 36; ++i) keyed.push_back({-map.scores[i], i});
    std::sort(keyed.begin(), keyed.end());
    BinaryMask expect = BinaryMask::empty(6, 6, 1);
    for (std::size_t i = 0; i < k; ++i) expect.bits[keyed[i].second] = 1;
    EXPECT_EQ(select_topk_mask(map, k), expect);
  }
  const auto map = random_map(3, 3, rng);
  EXPECT_EQ(select_topk_mask(map, 9).count(), 9u);
  const auto one = select_topk_mask(map, 1);
  const auto arg = std::max_element(map.scores.begin(), map.scores.end()) - map.scores.begin();
  EXPECT_TRUE(one.bits[static_cast<std::size_t>(arg)]);
  try {
    select_topk_mask(map, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::k_out_of_range);
  }
  EXPECT_THROW(select_topk_mask(map, 0), Error);
}

TEST(Rasterize, InvertsMaskToObjectsForSeparatedBoxes) {
  std::vector<Annotation> anns{{BBox::from_pixel_range(1, 1, 3, 2), 4, 1}, {BBox::from_pixel_range(6, 5, 6, 8), 4, 2}};
  const auto mask = rasterize(anns, 10, 10, 4);
  const auto back = mask_to_objects(mask);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].box, anns[0].box);
  EXPECT_EQ(back[1].box, anns[1].box);
}
