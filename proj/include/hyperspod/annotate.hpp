#pragma once

// Pixel-level <-> instance-level conversion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <vector>

#include "box.hpp"
#include "hsicube.hpp"

namespace hyperspod {

enum class Connectivity { four = 4, eight = 8 };

struct ComponentLabeling {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;  // 0 = background, 1..count
  int count = 0;
};

/// Breadth-first labeling; ids follow the row-major order of each
/// component's first pixel.
inline ComponentLabeling label_components(const BinaryMask& mask,
                                          Connectivity conn = Connectivity::eight) {
  if (mask.bits.size() != mask.height * mask.width) throw Error(Errc::size_mismatch, "mask length");
  ComponentLabeling out{mask.height, mask.width, std::vector<int>(mask.bits.size(), 0), 0};
  const auto H = static_cast<long>(mask.height), W = static_cast<long>(mask.width);
  std::queue<long> frontier;
  for (long start = 0; start < H * W; ++start) {
    if (!mask.bits[start] || out.labels[start]) continue;
    const int id = ++out.count;
    out.labels[start] = id;
    frontier.push(start);
    while (!frontier.empty()) {
      const long p = frontier.front();
      frontier.pop();
      const long r = p / W, c = p % W;
      for (long dr = -1; dr <= 1; ++dr)
        for (long dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          if (conn == Connectivity::four && dr != 0 && dc != 0) continue;
          const long nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
          const long q = nr * W + nc;
          if (mask.bits[q] && !out.labels[q]) {
            out.labels[q] = id;
            frontier.push(q);
          }
        }
    }
  }
  return out;
}

/// Tight pixel boxes of every component, indexed by label - 1.
inline std::vector<BBox> component_boxes(const ComponentLabeling& lab) {
  struct Extent {
    long c0, r0, c1, r1;
  };
  std::vector<Extent> ext(static_cast<std::size_t>(lab.count),
                          {std::numeric_limits<long>::max(), std::numeric_limits<long>::max(), -1, -1});
  for (std::size_t r = 0; r < lab.height; ++r)
    for (std::size_t c = 0; c < lab.width; ++c) {
      const int id = lab.labels[r * lab.width + c];
      if (!id) continue;
      auto& e = ext[static_cast<std::size_t>(id - 1)];
      e.c0 = std::min<long>(e.c0, static_cast<long>(c));
      e.r0 = std::min<long>(e.r0, static_cast<long>(r));
      e.c1 = std::max<long>(e.c1, static_cast<long>(c));
      e.r1 = std::max<long>(e.r1, static_cast<long>(r));
    }
  std::vector<BBox> boxes;
  boxes.reserve(ext.size());
  for (const auto& e : ext)
    boxes.push_back(BBox::from_pixel_range(static_cast<int>(e.c0), static_cast<int>(e.r0),
                                           static_cast<int>(e.c1), static_cast<int>(e.r1)));
  return boxes;
}

/// One annotation per connected component, with the tight enclosing box.
inline std::vector<Annotation> mask_to_objects(const BinaryMask& mask,
                                               Connectivity conn = Connectivity::eight) {
  const auto lab = label_components(mask, conn);
  const auto boxes = component_boxes(lab);
  std::vector<Annotation> out;
  out.reserve(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i)
    out.push_back({boxes[i], mask.class_id, static_cast<int>(i) + 1});
  return out;
}

/// Paints every box (pixel units, integer corners) into a mask.
inline BinaryMask rasterize(const std::vector<Annotation>& annotations, std::size_t height,
                            std::size_t width, int class_id) {
  BinaryMask mask = BinaryMask::empty(height, width, class_id);
  for (const auto& a : annotations) {
    if (a.class_id != class_id) continue;
    const long c0 = std::max(0L, std::lround(a.box.x0()));
    const long r0 = std::max(0L, std::lround(a.box.y0()));
    const long c1 = std::min(static_cast<long>(width), std::lround(a.box.x1()));
    const long r1 = std::min(static_cast<long>(height), std::lround(a.box.y1()));
    for (long r = r0; r < r1; ++r)
      for (long c = c0; c < c1; ++c) mask.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  }
  return mask;
}

struct NormalizedMap {
  std::vector<double> values;
  bool flat = false;  // max == min; values are all 0
};

/// Per-map min-max normalization to [0, 1].
inline NormalizedMap normalize_scores(const ScoreMap& map) {
  map.validate();
  NormalizedMap out{std::vector<double>(map.scores.size(), 0.0), true};
  if (map.scores.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(map.scores.begin(), map.scores.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return out;
  out.flat = false;
  const double span = hi - lo;
  for (std::size_t i = 0; i < map.scores.size(); ++i) out.values[i] = (map.scores[i] - lo) / span;
  return out;
}

struct DetectionResult {
  std::vector<Detection> detections;
  bool flat = false;  // the map had no contrast; no detections were produced
};

/// Normalizes, binarizes at `threshold` (>=) and boxes the components. The
/// confidence of each detection is the maximum normalized score inside its
/// component.
inline DetectionResult scores_to_detections(const ScoreMap& map, double threshold,
                                            Connectivity conn = Connectivity::eight) {
  const auto norm = normalize_scores(map);
  DetectionResult res;
  if (norm.flat) {
    res.flat = true;
    return res;
  }
  BinaryMask mask = BinaryMask::empty(map.height, map.width, map.class_id);
  for (std::size_t i = 0; i < norm.values.size(); ++i) mask.bits[i] = norm.values[i] >= threshold;
  const auto lab = label_components(mask, conn);
  const auto boxes = component_boxes(lab);
  std::vector<double> conf(boxes.size(), 0.0);
  for (std::size_t i = 0; i < lab.labels.size(); ++i)
    if (lab.labels[i]) {
      auto& c = conf[static_cast<std::size_t>(lab.labels[i] - 1)];
      c = std::max(c, norm.values[i]);
    }
  for (std::size_t k = 0; k < boxes.size(); ++k)
    res.detections.push_back({boxes[k], map.class_id, conf[k]});
  return res;
}

/// The 101 thresholds 0.00, 0.01, ..., 1.00.
inline double seg_threshold(int step) { return step / 100.0; }
inline constexpr int kSegSteps = 101;

struct SegCounts {
  std::vector<std::uint64_t> intersection = std::vector<std::uint64_t>(kSegSteps, 0);
  std::vector<std::uint64_t> uni = std::vector<std::uint64_t>(kSegSteps, 0);

  void add(const ScoreMap& map, const BinaryMask& gt) {
    if (map.height != gt.height || map.width != gt.width)
      throw Error(Errc::shape_mismatch, "score map and mask differ in shape");
    const auto norm = normalize_scores(map);
    for (std::size_t i = 0; i < norm.values.size(); ++i) {
      const bool g = gt.bits[i] != 0;
      // Pixel is predicted for every threshold t <= value.
      for (int s = 0; s < kSegSteps; ++s) {
        const bool p = norm.values[i] >= seg_threshold(s);
        intersection[s] += (p && g);
        uni[s] += (p || g);
      }
    }
  }
};

struct SegThreshold {
  double threshold = 0.0;
  double iou = 0.0;
};

inline SegThreshold best_from_counts(const SegCounts& counts) {
  SegThreshold best{0.0, -1.0};
  for (int s = 0; s < kSegSteps; ++s) {
    const double iou = counts.uni[s] ? static_cast<double>(counts.intersection[s]) /
                                           static_cast<double>(counts.uni[s])
                                     : 0.0;
    if (iou >= best.iou) best = {seg_threshold(s), iou};  // later steps win ties
  }
  return best;
}

/// Threshold on the normalized map that maximizes pixel IoU with `gt`.
inline SegThreshold best_seg_threshold(const ScoreMap& map, const BinaryMask& gt) {
  if (gt.count() == 0) throw Error(Errc::empty_gt, "ground-truth mask has no pixels");
  SegCounts counts;
  counts.add(map, gt);
  return best_from_counts(counts);
}

/// One threshold for a set of images: maps are normalized one by one, then
/// intersections and unions are summed over the set.
inline SegThreshold best_seg_threshold_pooled(const std::vector<ScoreMap>& maps,
                                              const std::vector<BinaryMask>& gts) {
  if (maps.size() != gts.size()) throw Error(Errc::length_mismatch, "maps vs masks");
  SegCounts counts;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    positives += gts[i].count();
    counts.add(maps[i], gts[i]);
  }
  if (positives == 0) throw Error(Errc::empty_gt, "ground-truth masks have no pixels");
  return best_from_counts(counts);
}

/// Exactly k pixels at the k highest scores; ties go to the earlier pixel in
/// row-major order.
inline BinaryMask select_topk_mask(const ScoreMap& map, std::size_t k) {
  const std::size_t n = map.height * map.width;
  if (k < 1 || k > n)
    throw Error(Errc::k_out_of_range, "k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  map.validate();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.scores[a] > map.scores[b]; });
  BinaryMask mask = BinaryMask::empty(map.height, map.width, map.class_id);
  for (std::size_t i = 0; i < k; ++i) mask.bits[order[i]] = 1;
  return mask;
}

}  // namespace hyperspod
