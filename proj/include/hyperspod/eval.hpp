#pragma once

// Instance- and pixel-level evaluation: COCO-style AP/AR with 101-point
// interpolation, single-threshold AP/recall, the inner/outer point-target
// criterion, fixed-confidence precision/recall tables, ROC AUC and
// controlled-SNR noise injection.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "annotate.hpp"
#include "box.hpp"
#include "defaults.hpp"
#include "hsicube.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace hyperspod {

enum class CriterionKind { coco, fixed_iou, inner_outer };

struct Criterion {
  CriterionKind kind = CriterionKind::coco;
  double iou = defaults::kLooseIou;       // fixed_iou
  double inner = defaults::kInnerBox;     // inner_outer, pixels
  double outer = defaults::kOuterBox;

  static Criterion coco() { return {}; }
  static Criterion fixed(double iou) { return {CriterionKind::fixed_iou, iou}; }
  static Criterion inner_outer(double inner = defaults::kInnerBox, double outer = defaults::kOuterBox) {
    return {CriterionKind::inner_outer, defaults::kLooseIou, inner, outer};
  }
};

inline std::string to_string(const Criterion& c) {
  switch (c.kind) {
    case CriterionKind::coco: return "coco";
    case CriterionKind::fixed_iou: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "iou%.0f", c.iou * 100.0);
      return buf;
    }
    case CriterionKind::inner_outer: return "inner-outer";
  }
  return "coco";
}

/// Accepts "coco", "iou25" (or any "iouNN") and "inner-outer".
inline Criterion parse_criterion(const std::string& s) {
  if (s == "coco") return Criterion::coco();
  if (s == "inner-outer" || s == "inner_outer") return Criterion::inner_outer();
  if (s.rfind("iou", 0) == 0 && s.size() > 3) {
    try {
      std::size_t used = 0;
      const int pct = std::stoi(s.substr(3), &used);
      if (used == s.size() - 3 && pct > 0 && pct <= 100) return Criterion::fixed(pct / 100.0);
    } catch (const std::exception&) {
    }
  }
  throw Error(Errc::invalid_argument, "unknown criterion '" + s + "'");
}

inline std::vector<double> coco_iou_grid() {
  std::vector<double> g;
  for (int i = 0; i < 10; ++i) g.push_back(0.5 + 0.05 * i);
  return g;
}

struct EvalConfig {
  std::vector<double> iou_grid = coco_iou_grid();
  double extra_iou = defaults::kLooseIou;
  std::size_t max_dets_per_image = defaults::kMaxDetsPerImage;
  /// When false, recall at the extra IoU uses every detection rather than
  /// the per-image top max_dets.
  bool limit_recall_dets = true;
  Criterion criterion;
  unsigned workers = 1;

  void validate() const {
    if (iou_grid.empty() || !std::is_sorted(iou_grid.begin(), iou_grid.end()))
      throw Error(Errc::invalid_argument, "IoU grid must be non-empty and ascending");
    if (max_dets_per_image < 1) throw Error(Errc::invalid_argument, "max_dets must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Matching

/// Decides whether a detection may match a ground-truth box and how good the
/// match is (higher wins). IoU rule: IoU >= threshold. Inner/outer rule: the
/// detection overlaps the inner square and lies within the outer square,
/// both centered on the ground-truth center.
struct MatchRule {
  CriterionKind kind = CriterionKind::fixed_iou;
  double iou_threshold = 0.5;
  double inner = defaults::kInnerBox;
  double outer = defaults::kOuterBox;

  static MatchRule at_iou(double t) { return {CriterionKind::fixed_iou, t}; }
  static MatchRule inner_outer(double inner, double outer) {
    return {CriterionKind::inner_outer, 0.0, inner, outer};
  }

  std::optional<double> quality(const BBox& det, const BBox& gt) const {
    const double q = iou(det, gt);
    if (kind == CriterionKind::inner_outer) {
      const BBox in{gt.cx, gt.cy, inner, inner};
      const BBox out{gt.cx, gt.cy, outer, outer};
      if (intersects(det, in) && contains(out, det)) return q;
      return std::nullopt;
    }
    if (q >= iou_threshold) return q;
    return std::nullopt;
  }
};

struct Matching {
  std::vector<int> det_to_gt;  // -1 for false positives
  std::vector<int> gt_to_det;  // -1 for missed objects

  bool tp(std::size_t det) const { return det_to_gt[det] >= 0; }
  std::size_t true_positives() const {
    return static_cast<std::size_t>(std::count_if(det_to_gt.begin(), det_to_gt.end(), [](int g) { return g >= 0; }));
  }
};

/// Greedy matching within one image: detections in descending confidence
/// (input order on ties) each take the unmatched same-class ground truth of
/// highest quality.
inline Matching match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                                 const MatchRule& rule) {
  Matching m{std::vector<int>(dets.size(), -1), std::vector<int>(gts.size(), -1)};
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  for (std::size_t d : order) {
    int best = -1;
    double best_q = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_to_det[g] >= 0 || gts[g].class_id != dets[d].class_id) continue;
      const auto q = rule.quality(dets[d].box, gts[g].box);
      if (q && *q > best_q) {
        best_q = *q;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      m.det_to_gt[d] = best;
      m.gt_to_det[static_cast<std::size_t>(best)] = static_cast<int>(d);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Precision/recall curves

struct ScoredHit {
  double confidence = 0.0;
  bool tp = false;
};

namespace detail {

struct PrCurve {
  std::vector<double> precision;  // monotone envelope
  std::vector<double> recall;
};

/// `hits` must already be in ranking order.
inline PrCurve pr_curve(const std::vector<ScoredHit>& hits, std::size_t num_gt) {
  PrCurve c;
  std::size_t tp = 0, fp = 0;
  for (const auto& h : hits) {
    (h.tp ? tp : fp) += 1;
    c.recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    c.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  for (std::size_t i = c.precision.size(); i-- > 1;)
    c.precision[i - 1] = std::max(c.precision[i - 1], c.precision[i]);
  return c;
}

inline std::vector<ScoredHit> ranked(std::vector<ScoredHit> hits) {
  std::stable_sort(hits.begin(), hits.end(),
                   [](const ScoredHit& a, const ScoredHit& b) { return a.confidence > b.confidence; });
  return hits;
}

}  // namespace detail

/// Area under the interpolated PR curve sampled at recall 0, 0.01, ..., 1.
/// Hits are ranked by descending confidence (stable).
inline double average_precision(const std::vector<ScoredHit>& hits, std::size_t num_gt) {
  if (num_gt == 0) throw Error(Errc::no_gt_for_class, "no ground truth for class");
  const auto c = detail::pr_curve(detail::ranked(hits), num_gt);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(c.recall.begin(), c.recall.end(), r - 1e-12);
    if (it != c.recall.end()) sum += c.precision[static_cast<std::size_t>(it - c.recall.begin())];
  }
  return sum / 101.0;
}

/// Exact area under the same interpolated curve (all-point integration).
inline double average_precision_exact(const std::vector<ScoredHit>& hits, std::size_t num_gt) {
  if (num_gt == 0) throw Error(Errc::no_gt_for_class, "no ground truth for class");
  const auto c = detail::pr_curve(detail::ranked(hits), num_gt);
  double area = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < c.recall.size(); ++i) {
    area += (c.recall[i] - prev) * c.precision[i];
    prev = c.recall[i];
  }
  return area;
}

inline double recall(const std::vector<ScoredHit>& hits, std::size_t num_gt) {
  if (num_gt == 0) throw Error(Errc::no_gt_for_class, "no ground truth for class");
  const auto tp = std::count_if(hits.begin(), hits.end(), [](const ScoredHit& h) { return h.tp; });
  return static_cast<double>(tp) / static_cast<double>(num_gt);
}

// ---------------------------------------------------------------------------
// Dataset evaluation

struct ClassMetrics {
  int class_id = 0;
  std::string name;
  std::size_t num_gt = 0;
  std::size_t num_dets = 0;
  std::vector<double> ap_at;      // per grid threshold
  std::vector<double> recall_at;  // per grid threshold
  double ap = 0.0;
  double ar = 0.0;
  double ap25 = 0.0;
  double re25 = 0.0;
  std::optional<double> auc;
  std::optional<double> seg_iou;
};

struct EvalReport {
  std::string criterion;
  std::vector<double> iou_grid;
  double extra_iou = defaults::kLooseIou;
  std::size_t max_dets_per_image = defaults::kMaxDetsPerImage;
  std::vector<ClassMetrics> classes;
  std::vector<int> skipped_classes;  // no ground truth anywhere
  double map = 0.0;
  double map25 = 0.0;
  double mar = 0.0;
  double mre25 = 0.0;
  std::optional<double> mauc;
  std::optional<double> miou;
};

namespace detail {

struct ImageGroup {
  std::vector<Annotation> gts;
  std::vector<Detection> dets;
};

inline std::map<int, ImageGroup> group_by_image(const AnnotationSet& gts, const DetectionSet& dets) {
  std::map<int, ImageGroup> g;
  for (const auto& im : gts.images) g[im.id];
  for (const auto& a : gts.annotations) g[a.image_id].gts.push_back(a.annotation);
  for (const auto& d : dets.detections) g[d.image_id].dets.push_back(d.detection);
  return g;
}

/// Same-class detections of one image, top `limit` by confidence.
inline std::vector<Detection> top_dets(const std::vector<Detection>& dets, int class_id, std::size_t limit) {
  std::vector<Detection> out;
  for (const auto& d : dets)
    if (d.class_id == class_id) out.push_back(d);
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  if (out.size() > limit) out.resize(limit);
  return out;
}

/// Scored hits of one class over all images under `rule`.
inline std::vector<ScoredHit> class_hits(const std::vector<const ImageGroup*>& images, int class_id,
                                         const MatchRule& rule, std::size_t limit, unsigned workers) {
  std::vector<std::vector<ScoredHit>> per_image(images.size());
  parallel_for(images.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto dets = top_dets(images[i]->dets, class_id, limit);
      std::vector<Annotation> gts;
      for (const auto& a : images[i]->gts)
        if (a.class_id == class_id) gts.push_back(a);
      const auto m = match_detections(dets, gts, rule);
      for (std::size_t d = 0; d < dets.size(); ++d) per_image[i].push_back({dets[d].confidence, m.tp(d)});
    }
  });
  std::vector<ScoredHit> all;
  for (auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  return all;
}

}  // namespace detail

/// COCO-style evaluation. Under the coco criterion AP/AR average over the
/// IoU grid and AP25/Re25 use the extra IoU. Under a fixed IoU or the
/// inner/outer rule every threshold collapses to that single rule, so
/// mAP = mAP25 and mAR = mRe25. Classes with no ground truth are skipped
/// from the means.
inline EvalReport evaluate(const AnnotationSet& gts, const DetectionSet& dets, const EvalConfig& cfg = {}) {
  cfg.validate();
  EvalReport rep;
  rep.criterion = to_string(cfg.criterion);
  rep.max_dets_per_image = cfg.max_dets_per_image;

  std::vector<MatchRule> grid;
  MatchRule loose;
  switch (cfg.criterion.kind) {
    case CriterionKind::coco:
      for (double t : cfg.iou_grid) grid.push_back(MatchRule::at_iou(t));
      loose = MatchRule::at_iou(cfg.extra_iou);
      rep.iou_grid = cfg.iou_grid;
      rep.extra_iou = cfg.extra_iou;
      break;
    case CriterionKind::fixed_iou:
      loose = MatchRule::at_iou(cfg.criterion.iou);
      grid = {loose};
      rep.iou_grid = {cfg.criterion.iou};
      rep.extra_iou = cfg.criterion.iou;
      break;
    case CriterionKind::inner_outer:
      loose = MatchRule::inner_outer(cfg.criterion.inner, cfg.criterion.outer);
      grid = {loose};
      rep.iou_grid.clear();
      rep.extra_iou = 0.0;
      break;
  }

  const auto groups = detail::group_by_image(gts, dets);
  std::vector<const detail::ImageGroup*> images;
  for (const auto& [id, g] : groups) images.push_back(&g);

  std::map<int, std::string> names;
  for (const auto& c : gts.categories) names[c.id] = c.name;
  for (const auto& a : gts.annotations) names.try_emplace(a.annotation.class_id, "");
  for (const auto& d : dets.detections) names.try_emplace(d.detection.class_id, "");

  for (const auto& [cls, name] : names) {
    ClassMetrics cm;
    cm.class_id = cls;
    cm.name = name;
    for (const auto& a : gts.annotations) cm.num_gt += a.annotation.class_id == cls;
    for (const auto& d : dets.detections) cm.num_dets += d.detection.class_id == cls;
    if (cm.num_gt == 0) {
      rep.skipped_classes.push_back(cls);
      continue;
    }
    for (const auto& rule : grid) {
      const auto hits = detail::class_hits(images, cls, rule, cfg.max_dets_per_image, cfg.workers);
      cm.ap_at.push_back(average_precision(hits, cm.num_gt));
      cm.recall_at.push_back(recall(hits, cm.num_gt));
    }
    cm.ap = std::accumulate(cm.ap_at.begin(), cm.ap_at.end(), 0.0) / static_cast<double>(grid.size());
    cm.ar = std::accumulate(cm.recall_at.begin(), cm.recall_at.end(), 0.0) / static_cast<double>(grid.size());
    const auto hits = detail::class_hits(images, cls, loose, cfg.max_dets_per_image, cfg.workers);
    cm.ap25 = average_precision(hits, cm.num_gt);
    if (cfg.limit_recall_dets) {
      cm.re25 = recall(hits, cm.num_gt);
    } else {
      const auto all = detail::class_hits(images, cls, loose, std::numeric_limits<std::size_t>::max(), cfg.workers);
      cm.re25 = recall(all, cm.num_gt);
    }
    rep.classes.push_back(std::move(cm));
  }

  if (!rep.classes.empty()) {
    const double n = static_cast<double>(rep.classes.size());
    for (const auto& c : rep.classes) {
      rep.map += c.ap;
      rep.map25 += c.ap25;
      rep.mar += c.ar;
      rep.mre25 += c.re25;
    }
    rep.map /= n;
    rep.map25 /= n;
    rep.mar /= n;
    rep.mre25 /= n;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Fixed confidence thresholds

struct PrRow {
  double threshold = 0.0;
  std::size_t num = 0;
  std::size_t tp = 0;
  double precision = 0.0;
  double recall = 0.0;
  bool precision_defined = true;  // false when no detection passes
};

/// Precision and recall of the detections with confidence >= each threshold,
/// all classes pooled.
inline std::vector<PrRow> fixed_threshold_pr(const AnnotationSet& gts, const DetectionSet& dets,
                                             const std::vector<double>& thresholds, const MatchRule& rule) {
  const auto groups = detail::group_by_image(gts, dets);
  const std::size_t num_gt = gts.annotations.size();
  std::vector<PrRow> rows;
  for (double t : thresholds) {
    PrRow row;
    row.threshold = t;
    for (const auto& [id, g] : groups) {
      std::vector<Detection> kept;
      for (const auto& d : g.dets)
        if (d.confidence >= t) kept.push_back(d);
      row.num += kept.size();
      row.tp += match_detections(kept, g.gts, rule).true_positives();
    }
    row.precision_defined = row.num > 0;
    row.precision = row.num ? static_cast<double>(row.tp) / static_cast<double>(row.num) : 0.0;
    row.recall = num_gt ? static_cast<double>(row.tp) / static_cast<double>(num_gt) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pixel-level metrics

/// ROC AUC via the Mann-Whitney rank statistic; tied scores share their
/// average rank.
inline double roc_auc(const ScoreMap& map, const BinaryMask& gt) {
  if (map.height != gt.height || map.width != gt.width || map.scores.size() != gt.bits.size())
    throw Error(Errc::shape_mismatch, "score map and mask differ in shape");
  const std::size_t n = map.scores.size();
  const std::size_t pos = gt.count(), neg = n - pos;
  if (pos == 0 || neg == 0) throw Error(Errc::degenerate_gt, "mask needs positive and negative pixels");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return map.scores[a] < map.scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && map.scores[order[j]] == map.scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (gt.bits[order[k]]) rank_sum += avg;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

/// Per-class pixel metrics over a set of images: AUC averaged over images
/// that contain both positive and negative pixels, and the pooled best
/// segmentation IoU. maps[i] and masks[i] must belong to the same image and
/// class.
inline void add_pixel_metrics(EvalReport& rep, const std::vector<ScoreMap>& maps,
                              const std::vector<BinaryMask>& masks) {
  if (maps.size() != masks.size()) throw Error(Errc::length_mismatch, "maps vs masks");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < maps.size(); ++i) by_class[maps[i].class_id].push_back(i);
  double auc_sum = 0.0, iou_sum = 0.0;
  std::size_t auc_n = 0, iou_n = 0;
  for (auto& cm : rep.classes) {
    const auto it = by_class.find(cm.class_id);
    if (it == by_class.end()) continue;
    double s = 0.0;
    std::size_t n = 0;
    std::vector<ScoreMap> cm_maps;
    std::vector<BinaryMask> cm_masks;
    std::size_t positives = 0;
    for (std::size_t i : it->second) {
      cm_maps.push_back(maps[i]);
      cm_masks.push_back(masks[i]);
      const std::size_t p = masks[i].count();
      positives += p;
      if (p == 0 || p == masks[i].bits.size()) continue;
      s += roc_auc(maps[i], masks[i]);
      ++n;
    }
    if (n) {
      cm.auc = s / static_cast<double>(n);
      auc_sum += *cm.auc;
      ++auc_n;
    }
    if (positives) {
      cm.seg_iou = best_seg_threshold_pooled(cm_maps, cm_masks).iou;
      iou_sum += *cm.seg_iou;
      ++iou_n;
    }
  }
  if (auc_n) rep.mauc = auc_sum / static_cast<double>(auc_n);
  if (iou_n) rep.miou = iou_sum / static_cast<double>(iou_n);
}

// ---------------------------------------------------------------------------
// Noise injection

/// Adds zero-mean Gaussian noise to every band with variance
/// var(band) / 10^(snr_db / 10). An infinite SNR returns the cube unchanged.
inline HyperCube inject_noise(const HyperCube& cube, double snr_db, Rng& rng) {
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw Error(Errc::invalid_argument, "SNR must be finite or +inf");
  HyperCube out = cube;
  if (std::isinf(snr_db)) return out;
  const double n = static_cast<double>(cube.pixels());
  std::vector<double> sd(cube.bands());
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    const auto band = cube.band(b);
    double mean = 0.0;
    for (float v : band) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : band) var += (v - mean) * (v - mean);
    var /= n;
    if (!(var > 0.0)) throw Error(Errc::zero_variance_band, "band " + std::to_string(b) + " has zero variance");
    sd[b] = std::sqrt(var / std::pow(10.0, snr_db / 10.0));
  }
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    auto band = out.band(b);
    for (float& v : band) v = static_cast<float>(v + rng.normal(0.0, sd[b]));
  }
  return out;
}

/// Empirical per-band SNR of `noisy` against `clean` in dB, with population
/// variances of the clean band and of the difference.
inline std::vector<double> band_snr_db(const HyperCube& clean, const HyperCube& noisy) {
  if (clean.height() != noisy.height() || clean.width() != noisy.width() || clean.bands() != noisy.bands())
    throw Error(Errc::shape_mismatch, "cubes differ in shape");
  std::vector<double> out;
  const double n = static_cast<double>(clean.pixels());
  for (std::size_t b = 0; b < clean.bands(); ++b) {
    const auto s = clean.band(b), x = noisy.band(b);
    double ms = 0.0, md = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      ms += s[i];
      md += static_cast<double>(x[i]) - s[i];
    }
    ms /= n;
    md /= n;
    double vs = 0.0, vd = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      vs += (s[i] - ms) * (s[i] - ms);
      const double d = static_cast<double>(x[i]) - s[i] - md;
      vd += d * d;
    }
    out.push_back(10.0 * std::log10(vs / vd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const EvalReport& r) {
  json classes = json::array();
  for (const auto& c : r.classes) {
    json jc{{"class_id", c.class_id}, {"name", c.name},        {"num_gt", c.num_gt},
            {"num_dets", c.num_dets}, {"ap_at_iou", c.ap_at},   {"recall_at_iou", c.recall_at},
            {"ap", c.ap},             {"ar", c.ar},             {"ap25", c.ap25},
            {"re25", c.re25}};
    jc["auc"] = c.auc ? json(*c.auc) : json(nullptr);
    jc["seg_iou"] = c.seg_iou ? json(*c.seg_iou) : json(nullptr);
    classes.push_back(jc);
  }
  json j{{"criterion", r.criterion},
         {"iou_grid", r.iou_grid},
         {"extra_iou", r.extra_iou},
         {"max_dets_per_image", r.max_dets_per_image},
         {"classes", classes},
         {"skipped_classes", r.skipped_classes},
         {"mAP", r.map},
         {"mAP25", r.map25},
         {"mAR", r.mar},
         {"mRe25", r.mre25}};
  j["mAUC"] = r.mauc ? json(*r.mauc) : json(nullptr);
  j["mIoU"] = r.miou ? json(*r.miou) : json(nullptr);
  return j;
}

inline json to_json(const std::vector<PrRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"threshold", r.threshold},
                   {"num", r.num},
                   {"tp", r.tp},
                   {"precision", r.precision},
                   {"precision_defined", r.precision_defined},
                   {"recall", r.recall}});
  return out;
}

inline EvalReport report_from_json(const json& j) {
  EvalReport r;
  auto opt = [](const json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>(v.get<double>()); };
  try {
    r.criterion = j.at("criterion").get<std::string>();
    r.iou_grid = j.value("iou_grid", std::vector<double>{});
    r.extra_iou = j.value("extra_iou", r.extra_iou);
    r.max_dets_per_image = j.value("max_dets_per_image", r.max_dets_per_image);
    r.skipped_classes = j.value("skipped_classes", std::vector<int>{});
    r.map = j.at("mAP").get<double>();
    r.map25 = j.at("mAP25").get<double>();
    r.mar = j.at("mAR").get<double>();
    r.mre25 = j.at("mRe25").get<double>();
    r.mauc = opt(j.value("mAUC", json(nullptr)));
    r.miou = opt(j.value("mIoU", json(nullptr)));
    for (const auto& c : j.at("classes")) {
      ClassMetrics m;
      m.class_id = c.at("class_id").get<int>();
      m.name = c.value("name", std::string{});
      m.num_gt = c.value("num_gt", std::size_t{0});
      m.num_dets = c.value("num_dets", std::size_t{0});
      m.ap_at = c.value("ap_at_iou", std::vector<double>{});
      m.recall_at = c.value("recall_at_iou", std::vector<double>{});
      m.ap = c.at("ap").get<double>();
      m.ar = c.at("ar").get<double>();
      m.ap25 = c.at("ap25").get<double>();
      m.re25 = c.at("re25").get<double>();
      m.auc = opt(c.value("auc", json(nullptr)));
      m.seg_iou = opt(c.value("seg_iou", json(nullptr)));
      r.classes.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("evaluation report: ") + e.what());
  }
  return r;
}

/// Checks the keys and value ranges of a serialized report.
inline bool report_schema_valid(const json& j, std::string* why = nullptr) {
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  auto unit = [](const json& v) { return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0; };
  for (const char* k : {"criterion", "classes", "mAP", "mAP25", "mAR", "mRe25", "mAUC", "mIoU"})
    if (!j.contains(k)) return fail(std::string("missing ") + k);
  for (const char* k : {"mAP", "mAP25", "mAR", "mRe25"})
    if (!unit(j[k])) return fail(std::string(k) + " outside [0,1]");
  for (const char* k : {"mAUC", "mIoU"})
    if (!j[k].is_null() && !unit(j[k])) return fail(std::string(k) + " outside [0,1]");
  if (!j["classes"].is_array()) return fail("classes is not an array");
  for (const auto& c : j["classes"]) {
    for (const char* k : {"class_id", "ap", "ar", "ap25", "re25", "ap_at_iou", "recall_at_iou"})
      if (!c.contains(k)) return fail(std::string("class entry missing ") + k);
    for (const char* k : {"ap", "ar", "ap25", "re25"})
      if (!unit(c[k])) return fail(std::string("class ") + k + " outside [0,1]");
  }
  return true;
}

namespace detail {

inline std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string fmt3(const std::optional<double>& v) { return v ? fmt3(*v) : std::string("-"); }

}  // namespace detail

/// Markdown tables: per-class AP columns followed by the mean metrics, then
/// a per-class detail table.
inline std::string to_markdown(const EvalReport& r, const std::string& method = "method") {
  std::ostringstream os;
  os << "### Detection (" << r.criterion << ")\n\n| Method |";
  for (std::size_t i = 0; i < r.classes.size(); ++i) os << " C" << r.classes[i].class_id << " |";
  os << " mAP | mAP25 | mAR | mRe25 |\n|---|";
  for (std::size_t i = 0; i < r.classes.size() + 4; ++i) os << "---|";
  os << "\n| " << method << " |";
  for (const auto& c : r.classes) os << " " << detail::fmt3(c.ap) << " |";
  os << " " << detail::fmt3(r.map) << " | " << detail::fmt3(r.map25) << " | " << detail::fmt3(r.mar) << " | "
     << detail::fmt3(r.mre25) << " |\n\n";

  os << "| Class | Name | GT | Dets | AP | AP25 | AR | Re25 | AUC | Seg IoU |\n"
     << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.classes)
    os << "| C" << c.class_id << " | " << c.name << " | " << c.num_gt << " | " << c.num_dets << " | "
       << detail::fmt3(c.ap) << " | " << detail::fmt3(c.ap25) << " | " << detail::fmt3(c.ar) << " | "
       << detail::fmt3(c.re25) << " | " << detail::fmt3(c.auc) << " | " << detail::fmt3(c.seg_iou) << " |\n";
  if (r.mauc || r.miou)
    os << "\nmAUC " << detail::fmt3(r.mauc) << ", mIoU " << detail::fmt3(r.miou) << "\n";
  if (!r.skipped_classes.empty()) {
    os << "\nClasses without ground truth (excluded from means):";
    for (int c : r.skipped_classes) os << " C" << c;
    os << "\n";
  }
  return os.str();
}

inline std::string to_markdown(const std::vector<PrRow>& rows) {
  std::ostringstream os;
  os << "| Threshold | Num | TP | Pr | Re |\n|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << detail::fmt3(r.threshold) << " | " << r.num << " | " << r.tp << " | "
       << (r.precision_defined ? detail::fmt3(r.precision) : std::string("0.000*")) << " | "
       << detail::fmt3(r.recall) << " |\n";
  return os.str();
}

}  // namespace hyperspod
