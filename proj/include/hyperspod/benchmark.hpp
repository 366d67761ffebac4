#pragma once

// Detection-by-segmentation pipeline over a generated dataset: score maps
// from a classic detector, per-class thresholds, connected components,
// then instance- and pixel-level evaluation.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "annotate.hpp"
#include "eval.hpp"
#include "hsicube.hpp"
#include "htd.hpp"
#include "scenesynth.hpp"
#include "specmodel.hpp"

namespace hyperspod {

inline std::string score_file_name(const std::string& stem, int class_id) {
  return stem + "_c" + std::to_string(class_id) + ".scr";
}

/// Per-class windows listed in a dataset manifest, falling back to `fallback`.
inline WindowTable windows_from_manifest(const json& manifest, DualWindow fallback = {5, 7}) {
  WindowTable t;
  t.fallback = fallback;
  if (manifest.contains("windows"))
    for (const auto& [cls, w] : manifest.at("windows").items())
      t.per_class[std::stoi(cls)] = {w.at(0).get<int>(), w.at(1).get<int>()};
  return t;
}

/// Per-class thresholds: one pooled best-IoU threshold per class over all
/// maps of that class.
inline std::map<int, SegThreshold> auto_thresholds(const std::vector<ScoreMap>& maps,
                                                   const std::vector<BinaryMask>& masks) {
  if (maps.size() != masks.size()) throw Error(Errc::length_mismatch, "maps vs masks");
  std::map<int, std::pair<std::vector<ScoreMap>, std::vector<BinaryMask>>> by_class;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    auto& slot = by_class[maps[i].class_id];
    slot.first.push_back(maps[i]);
    slot.second.push_back(masks[i]);
  }
  std::map<int, SegThreshold> out;
  for (const auto& [cls, pair] : by_class) {
    std::size_t positives = 0;
    for (const auto& m : pair.second) positives += m.count();
    if (positives) out[cls] = best_seg_threshold_pooled(pair.first, pair.second);
  }
  return out;
}

struct BenchmarkOptions {
  HtdMethod method = HtdMethod::cem;
  std::string split = "test";
  std::optional<double> threshold;  // unset: per-class auto threshold
  std::optional<DualWindow> window;  // overrides the manifest windows
  Connectivity connectivity = Connectivity::eight;
  HtdOptions htd;
  EvalConfig eval;
};

struct BenchmarkResult {
  EvalReport report;
  std::map<int, double> thresholds;
  DetectionSet detections;
  AnnotationSet ground_truth;
};

inline BenchmarkResult run_benchmark(const std::filesystem::path& dataset, const BenchmarkOptions& opt = {}) {
  const json manifest = detail::read_json(dataset / "manifest.json");
  if (!manifest.contains("splits") || !manifest.at("splits").contains(opt.split))
    throw Error(Errc::invalid_argument, "dataset has no split '" + opt.split + "'");
  const auto& split = manifest.at("splits").at(opt.split);
  const PriorSpectra priors = read_priors_csv(dataset / manifest.value("priors", std::string("priors.csv")));
  WindowTable windows = windows_from_manifest(manifest);
  if (opt.window) {
    windows.per_class.clear();
    windows.fallback = *opt.window;
  }

  BenchmarkResult res;
  res.ground_truth = read_annotations(dataset / split.at("annotations").get<std::string>());

  std::vector<ScoreMap> maps;
  std::vector<BinaryMask> masks;
  std::vector<int> image_of;
  for (const auto& rec : split.at("images")) {
    const int id = rec.at("id").get<int>();
    const HyperCube cube = read_cube(dataset / rec.at("file").get<std::string>());
    for (auto& m : detect_all(cube, priors, opt.method, windows, opt.htd)) {
      const auto key = std::to_string(m.class_id);
      masks.push_back(rec.at("masks").contains(key)
                          ? read_mask(dataset / rec.at("masks").at(key).get<std::string>())
                          : BinaryMask::empty(m.height, m.width, m.class_id));
      maps.push_back(std::move(m));
      image_of.push_back(id);
    }
  }

  if (opt.threshold) {
    for (const auto& m : maps) res.thresholds[m.class_id] = *opt.threshold;
  } else {
    for (const auto& [cls, t] : auto_thresholds(maps, masks)) res.thresholds[cls] = t.threshold;
  }

  res.detections.images = res.ground_truth.images;
  res.detections.categories = res.ground_truth.categories;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto it = res.thresholds.find(maps[i].class_id);
    if (it == res.thresholds.end()) continue;
    for (const auto& d : scores_to_detections(maps[i], it->second, opt.connectivity).detections)
      res.detections.detections.push_back({image_of[i], d});
  }

  res.report = evaluate(res.ground_truth, res.detections, opt.eval);
  add_pixel_metrics(res.report, maps, masks);
  return res;
}

}  // namespace hyperspod
