#pragma once

// Set-prediction machinery: matching costs, Hungarian assignment, the hybrid
// forced + dynamic assigner, denoising-query generators and NMS.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "box.hpp"
#include "defaults.hpp"
#include "hsicube.hpp"
#include "rng.hpp"

namespace hyperspod {

/// Generalized IoU in [-1, 1].
inline double giou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double ex = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double ey = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double enclosing = ex * ey;
  const double iou_v = uni > 0.0 ? inter / uni : 0.0;
  return enclosing > 0.0 ? iou_v - (enclosing - uni) / enclosing : iou_v;
}

/// Positive focal term -alpha (1 - p)^gamma log p for the gt class score p.
inline double focal_cls_cost(double p, double alpha = defaults::kFocalAlpha,
                             double gamma = defaults::kFocalGamma) {
  const double q = std::clamp(p, 1e-12, 1.0);
  return -alpha * std::pow(1.0 - q, gamma) * std::log(q);
}

/// L1 distance between (cx, cy, w, h) vectors.
inline double l1_cost(const BBox& a, const BBox& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

struct LossWeights {
  double cls = 1.0;
  double l1 = 1.0;
  double giou = 1.0;

  /// The training-loss coefficients.
  static LossWeights training() {
    return {defaults::kLossWeightCls, defaults::kLossWeightL1, defaults::kLossWeightGiou};
  }
};

/// Row-major G x P cost matrix.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// by the shortest augmenting path method with row/column potentials.
/// Returns the column chosen for each row.
inline std::vector<std::size_t> hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.rows, m = cost.cols;
  if (n > m)
    throw Error(Errc::infeasible, std::to_string(n) + " rows cannot be matched to " +
                                      std::to_string(m) + " columns");
  if (cost.values.size() != n * m) throw Error(Errc::size_mismatch, "cost matrix length");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw Error(Errc::non_finite_sample, "cost matrix has NaN/Inf");
  if (n == 0) return {};

  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (match[j] != 0) row_to_col[match[j] - 1] = j - 1;
  return row_to_col;
}

inline double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& row_to_col) {
  double total = 0.0;
  for (std::size_t r = 0; r < row_to_col.size(); ++r) total += cost(r, row_to_col[r]);
  return total;
}

struct GroundTruth {
  BBox box;  // normalized
  int class_index = 0;
};

struct Prediction {
  BBox box;                   // normalized
  std::vector<double> scores; // per class, in (0, 1)
};

enum class PairOrigin { forced, dynamic };

struct AssignedPair {
  std::size_t gt = 0;
  std::size_t pred = 0;
  PairOrigin origin = PairOrigin::forced;
  double iou = 0.0;
};

struct AssignResult {
  std::vector<AssignedPair> pairs;
};

inline void to_json(json& j, const AssignResult& r) {
  j = json::array();
  for (const auto& p : r.pairs)
    j.push_back({{"gt", p.gt},
                 {"pred", p.pred},
                 {"origin", p.origin == PairOrigin::forced ? "forced" : "dynamic"},
                 {"iou", p.iou}});
}

/// Combined matching cost: w_giou (1 - GIoU) + w_l1 L1 + w_cls focal.
inline CostMatrix matching_cost(const std::vector<GroundTruth>& gts,
                                const std::vector<Prediction>& preds, const LossWeights& w) {
  CostMatrix c{gts.size(), preds.size(), std::vector<double>(gts.size() * preds.size())};
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t p = 0; p < preds.size(); ++p) {
      const auto cls = static_cast<std::size_t>(gts[g].class_index);
      if (cls >= preds[p].scores.size())
        throw Error(Errc::shape_mismatch, "gt class index exceeds prediction score count");
      c(g, p) = w.giou * (1.0 - giou(gts[g].box, preds[p].box)) +
                w.l1 * l1_cost(gts[g].box, preds[p].box) + w.cls * focal_cls_cost(preds[p].scores[cls]);
    }
  return c;
}

/// Forced Hungarian matching followed by dynamic Max-IoU matching: each gt
/// additionally takes up to `t_cap` not-yet-forced predictions with IoU above
/// `tau_iou`, best first. A prediction that qualifies for several gts goes
/// to the one it overlaps most, so no prediction index repeats.
inline AssignResult hybrid_assign(const std::vector<GroundTruth>& gts,
                                  const std::vector<Prediction>& preds, const LossWeights& w = {},
                                  double tau_iou = defaults::kDynamicIouThreshold,
                                  int t_cap = defaults::kDynamicCap) {
  if (gts.size() > preds.size())
    throw Error(Errc::infeasible, "fewer predictions than ground-truth boxes");
  AssignResult res;
  const auto forced = hungarian(matching_cost(gts, preds, w));
  std::vector<bool> taken(preds.size(), false);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    taken[forced[g]] = true;
    res.pairs.push_back({g, forced[g], PairOrigin::forced, iou(gts[g].box, preds[forced[g]].box)});
  }

  // Candidate lists, resolving multi-gt candidates to their best gt.
  std::vector<std::vector<std::pair<double, std::size_t>>> cand(gts.size());
  for (std::size_t p = 0; p < preds.size(); ++p) {
    if (taken[p]) continue;
    std::size_t best_g = gts.size();
    double best = tau_iou;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(gts[g].box, preds[p].box);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) cand[best_g].push_back({best, p});
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    auto& c = cand[g];
    std::stable_sort(c.begin(), c.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const auto keep = std::min<std::size_t>(c.size(), static_cast<std::size_t>(std::max(0, t_cap)));
    for (std::size_t k = 0; k < keep; ++k) res.pairs.push_back({g, c[k].second, PairOrigin::dynamic, c[k].first});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Denoising queries

enum class Polarity { positive, negative };

struct NoisedQuery {
  BBox box;  // normalized, clamped into (0, 1)
  Polarity polarity = Polarity::positive;
  std::size_t gt_index = 0;
  double offset_x = 0.0;  // applied center shift, before clamping
  double offset_y = 0.0;
  bool clamped = false;   // clamping changed the center
};

namespace detail {

inline constexpr double kUnitMargin = 1e-6;

inline double clamp_unit(double v) { return std::clamp(v, kUnitMargin, 1.0 - kUnitMargin); }

/// Uniform draw from [-hi, -lo] U [lo, hi].
inline double two_sided(double lo, double hi, Rng& rng) {
  const double mag = rng.uniform(lo, hi);
  return rng.uniform() < 0.5 ? -mag : mag;
}

}  // namespace detail

struct CcdnParams {
  double tau1 = defaults::kCcdnCenterShift;
  double tau2 = defaults::kCcdnBoxScale;
  std::size_t pairs = defaults::kCcdnPairs;
  double min_width = defaults::kCcdnMinWidth;
  int negative_retries = defaults::kCcdnNegativeRetries;
};

/// Center-shifting contrastive denoising queries: per pair and per gt one
/// positive (center shift strictly inside half of tau1 * size) and one
/// negative (shift magnitude in [0.5, 1] of tau1 * size on both axes). Sizes
/// are drawn from [max(min_width, s - tau2 s), s + tau2 s] for both polarities.
/// Negatives whose clamped center would fall back into the positive region
/// are redrawn a few times before being clamped anyway.
inline std::vector<NoisedQuery> ccdn_generate(const std::vector<BBox>& gts, const CcdnParams& p,
                                              Rng& rng) {
  if (!(p.tau1 > 0.0) || !(p.tau2 > 0.0))
    throw Error(Errc::invalid_argument, "tau1 and tau2 must be positive");
  std::vector<NoisedQuery> out;
  out.reserve(2 * p.pairs * gts.size());
  auto scaled = [&](double s) {
    return rng.uniform(std::max(p.min_width, s - p.tau2 * s), s + p.tau2 * s);
  };
  for (std::size_t k = 0; k < p.pairs; ++k)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const BBox& b = gts[g];
      const double hx = 0.5 * p.tau1 * b.w, hy = 0.5 * p.tau1 * b.h;

      NoisedQuery pos;
      pos.polarity = Polarity::positive;
      pos.gt_index = g;
      pos.offset_x = rng.uniform_open(-hx, hx);
      pos.offset_y = rng.uniform_open(-hy, hy);
      pos.box = {detail::clamp_unit(b.cx + pos.offset_x), detail::clamp_unit(b.cy + pos.offset_y),
                 detail::clamp_unit(scaled(b.w)), detail::clamp_unit(scaled(b.h))};
      pos.clamped = pos.box.cx != b.cx + pos.offset_x || pos.box.cy != b.cy + pos.offset_y;
      out.push_back(pos);

      NoisedQuery neg;
      neg.polarity = Polarity::negative;
      neg.gt_index = g;
      for (int attempt = 0; attempt <= p.negative_retries; ++attempt) {
        neg.offset_x = detail::two_sided(hx, 2.0 * hx, rng);
        neg.offset_y = detail::two_sided(hy, 2.0 * hy, rng);
        const double cx = detail::clamp_unit(b.cx + neg.offset_x);
        const double cy = detail::clamp_unit(b.cy + neg.offset_y);
        neg.box.cx = cx;
        neg.box.cy = cy;
        if (std::abs(cx - b.cx) >= hx && std::abs(cy - b.cy) >= hy) break;
      }
      neg.clamped = neg.box.cx != b.cx + neg.offset_x || neg.box.cy != b.cy + neg.offset_y;
      neg.box.w = detail::clamp_unit(scaled(b.w));
      neg.box.h = detail::clamp_unit(scaled(b.h));
      out.push_back(neg);
    }
  return out;
}

/// Corner-noise contrastive denoising (the reference scheme CCDN is compared
/// against): each corner moves by sign * u * (w/2 or h/2) * noise_scale with
/// u in [0, 1) for positives and [1, 2) for negatives.
inline std::vector<NoisedQuery> cdn_generate(const std::vector<BBox>& gts, std::size_t pairs,
                                             double noise_scale, Rng& rng) {
  std::vector<NoisedQuery> out;
  out.reserve(2 * pairs * gts.size());
  for (std::size_t k = 0; k < pairs; ++k)
    for (std::size_t g = 0; g < gts.size(); ++g)
      for (Polarity pol : {Polarity::positive, Polarity::negative}) {
        const BBox& b = gts[g];
        const double base = pol == Polarity::positive ? 0.0 : 1.0;
        const double diff[4] = {0.5 * b.w, 0.5 * b.h, 0.5 * b.w, 0.5 * b.h};
        double c[4] = {b.x0(), b.y0(), b.x1(), b.y1()};
        for (int i = 0; i < 4; ++i) {
          const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
          c[i] = std::clamp(c[i] + sign * (base + rng.uniform()) * diff[i] * noise_scale, 0.0, 1.0);
        }
        if (c[2] < c[0]) std::swap(c[0], c[2]);
        if (c[3] < c[1]) std::swap(c[1], c[3]);
        NoisedQuery q;
        q.polarity = pol;
        q.gt_index = g;
        q.box = BBox::from_corners(c[0], c[1], c[2], c[3]);
        q.box = {detail::clamp_unit(q.box.cx), detail::clamp_unit(q.box.cy),
                 detail::clamp_unit(q.box.w), detail::clamp_unit(q.box.h)};
        q.offset_x = q.box.cx - b.cx;
        q.offset_y = q.box.cy - b.cy;
        out.push_back(q);
      }
  return out;
}

// ---------------------------------------------------------------------------
// NMS

/// Greedy NMS. Candidates are visited by descending confidence (ties by
/// input index) and dropped when their IoU with a kept box exceeds
/// `iou_thresh`. Output is in visiting order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets,
                                  double iou_thresh = defaults::kNmsIou) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, dets[i].box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

/// NMS within each class; the merged list is sorted by confidence with ties
/// kept in class-then-visit order.
inline std::vector<Detection> nms_per_class(const std::vector<Detection>& dets,
                                            double iou_thresh = defaults::kNmsIou) {
  std::vector<int> classes;
  for (const auto& d : dets)
    if (std::find(classes.begin(), classes.end(), d.class_id) == classes.end()) classes.push_back(d.class_id);
  std::sort(classes.begin(), classes.end());
  std::vector<Detection> out;
  for (int c : classes) {
    std::vector<Detection> sub;
    for (const auto& d : dets)
      if (d.class_id == c) sub.push_back(d);
    const auto kept = nms(sub, iou_thresh);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  return out;
}

}  // namespace hyperspod
