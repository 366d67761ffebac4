// hyperspod command-line tool.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "hyperspod/hyperspod.hpp"

namespace fs = std::filesystem;
using namespace hyperspod;

namespace {

struct Globals {
  bool pretty = false;
  unsigned workers = 0;
};

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

void emit_or_write(const json& j, const std::string& out) {
  if (out.empty())
    emit(j);
  else
    detail::write_json(out, j);
}

// Trailing digits of a file stem ("img_0007" -> 7), else nullopt.
std::optional<int> stem_index(const std::string& stem) {
  static const std::regex re(R"((\d+)$)");
  std::smatch m;
  if (std::regex_search(stem, m, re)) return std::stoi(m[1]);
  return std::nullopt;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Globals& g, const std::string& config, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  DatasetConfig cfg = load_dataset_config(config);
  if (seed) cfg.seed = *seed;
  const json manifest = generate_dataset(cfg, out, resolve_workers(g.workers));
  if (g.pretty) {
    std::cout << "dataset written to " << out << "\n";
    for (const auto& [name, split] : manifest.at("splits").items()) {
      std::size_t objects = 0, skipped = 0;
      for (const auto& im : split.at("images")) {
        objects += im.at("objects").get<std::size_t>();
        skipped += im.at("skipped").get<std::size_t>();
      }
      std::cout << "  " << name << ": " << split.at("images").size() << " images, " << objects << " objects, "
                << skipped << " skipped placements\n";
    }
  } else {
    emit(manifest);
  }
  return 0;
}

int cmd_detect(const Globals& g, const std::string& method, const std::string& priors_path,
               std::optional<int> win_in, std::optional<int> win_out, const std::string& manifest,
               const std::string& cube_path, const std::string& out) {
  const HyperCube cube = read_cube(cube_path);
  const PriorSpectra priors = read_priors_csv(priors_path);
  WindowTable windows = manifest.empty() ? WindowTable::spod() : windows_from_manifest(detail::read_json(manifest));
  if (win_in || win_out) {
    if (!win_in || !win_out) throw Error(Errc::invalid_argument, "--win-in and --win-out go together");
    windows.per_class.clear();
    windows.fallback = {*win_in, *win_out};
  }
  HtdOptions opt;
  opt.workers = resolve_workers(g.workers);
  const auto maps = detect_all(cube, priors, parse_htd_method(method), windows, opt);
  const std::string stem = fs::path(cube_path).stem().string();
  json files = json::array();
  for (const auto& m : maps) {
    const fs::path p = fs::path(out) / score_file_name(stem, m.class_id);
    write_score_map(m, p);
    const auto w = windows.for_class(m.class_id);
    files.push_back({{"class_id", m.class_id}, {"file", p.filename().string()}, {"window", {w.w_in, w.w_out}}});
  }
  if (g.pretty) {
    for (const auto& f : files)
      std::cout << "class " << f["class_id"] << " -> " << f["file"].get<std::string>() << "\n";
  } else {
    emit({{"method", method}, {"cube", cube_path}, {"maps", files}});
  }
  return 0;
}

int cmd_forward(const Globals& g, const std::string& cube_path, const std::string& weights,
                const std::string& config, std::optional<std::uint64_t> init_seed, const std::string& out) {
  const HyperCube cube = read_cube(cube_path);
  const json cfg_json = config.empty() ? json::object() : detail::read_json(config);
  ForwardConfig cfg = parse_forward_config(cfg_json);
  cfg.workers = resolve_workers(g.workers);
  if (init_seed) {
    ModelConfig mc;
    if (cfg_json.contains("model")) {
      json m = cfg_json.at("model");
      if (!m.contains("bands")) m["bands"] = cube.bands();
      mc = m.get<ModelConfig>();
    } else {
      mc.bands = cube.bands();
    }
    mc.encoder_layers = cfg.encoder_layers;
    mc.decoder_layers = cfg.decoder_layers;
    write_weights(random_weights(mc, *init_seed), weights);
  }
  const ModelWeights w = read_weights(weights);
  const auto dets = run_forward(cube, w, cfg);
  DetectionSet set;
  set.images.push_back({0, fs::path(cube_path).filename().string(), static_cast<int>(cube.height()),
                        static_cast<int>(cube.width())});
  for (std::size_t c = 0; c < w.config.num_classes; ++c)
    set.categories.push_back({static_cast<int>(c) + 1, "C" + std::to_string(c + 1)});
  for (const auto& d : dets) set.detections.push_back({0, d});
  if (g.pretty && out.empty()) {
    std::printf("%-6s %-8s %-10s %-10s %-10s %-10s\n", "class", "score", "cx", "cy", "w", "h");
    for (const auto& d : dets)
      std::printf("%-6d %-8.4f %-10.4f %-10.4f %-10.4f %-10.4f\n", d.class_id, d.confidence, d.box.cx, d.box.cy,
                  d.box.w, d.box.h);
  } else {
    emit_or_write(detections_to_json(set), out);
  }
  return 0;
}

int cmd_scores_to_objects(const Globals& g, const std::string& scores_dir, const std::string& threshold,
                          const std::string& gt_dir, int connectivity, const std::string& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(scores_dir))
    if (e.is_regular_file() && e.path().extension() == ".scr") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(Errc::io_failure, "no .scr score maps in " + scores_dir);

  static const std::regex name_re(R"((.*)_c(-?\d+)$)");
  std::vector<ScoreMap> maps;
  std::vector<std::string> stems;
  for (const auto& f : files) {
    maps.push_back(read_score_map(f));
    std::smatch m;
    const std::string s = f.stem().string();
    stems.push_back(std::regex_match(s, m, name_re) ? m[1].str() : s);
  }

  std::map<int, double> thresholds;
  if (threshold == "auto") {
    if (gt_dir.empty()) throw Error(Errc::invalid_argument, "--threshold auto needs --gt <mask dir>");
    std::vector<BinaryMask> masks;
    for (const auto& f : files) masks.push_back(read_mask(fs::path(gt_dir) / (f.stem().string() + ".msk")));
    for (const auto& [cls, t] : auto_thresholds(maps, masks)) thresholds[cls] = t.threshold;
  } else {
    double t = 0.0;
    try {
      t = std::stod(threshold);
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "threshold must be a number or 'auto'");
    }
    if (t < 0.0 || t > 1.0) throw Error(Errc::invalid_argument, "threshold must lie in [0, 1]");
    for (const auto& m : maps) thresholds[m.class_id] = t;
  }

  std::vector<std::string> unique = stems;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < unique.size(); ++i) ids[unique[i]] = stem_index(unique[i]).value_or(static_cast<int>(i));

  DetectionSet set;
  for (const auto& s : unique) set.images.push_back({ids[s], s + ".hsc", 0, 0});
  std::set<int> classes;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    auto& info = *std::find_if(set.images.begin(), set.images.end(), [&](const auto& im) { return im.id == ids[stems[i]]; });
    info.height = static_cast<int>(maps[i].height);
    info.width = static_cast<int>(maps[i].width);
    classes.insert(maps[i].class_id);
    const auto it = thresholds.find(maps[i].class_id);
    if (it == thresholds.end()) continue;
    const auto conn = connectivity == 4 ? Connectivity::four : Connectivity::eight;
    for (const auto& d : scores_to_detections(maps[i], it->second, conn).detections)
      set.detections.push_back({ids[stems[i]], d});
  }
  for (int c : classes) set.categories.push_back({c, "C" + std::to_string(c)});

  if (g.pretty && out.empty()) {
    for (const auto& [cls, t] : thresholds) std::cout << "class " << cls << ": threshold " << t << "\n";
    std::cout << set.detections.size() << " detections\n";
    return 0;
  }
  json j = detections_to_json(set);
  json th = json::object();
  for (const auto& [cls, t] : thresholds) th[std::to_string(cls)] = t;
  j["thresholds"] = th;
  emit_or_write(j, out);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& dets, const std::string& gts, const std::string& criterion,
             const std::string& report, std::size_t max_dets, bool no_recall_limit, const std::string& out) {
  EvalConfig cfg;
  cfg.criterion = parse_criterion(criterion);
  cfg.max_dets_per_image = max_dets;
  cfg.limit_recall_dets = !no_recall_limit;
  cfg.workers = resolve_workers(g.workers);
  const EvalReport rep = evaluate(read_annotations(gts), read_detections(dets), cfg);
  if (report == "markdown") {
    const std::string md = to_markdown(rep);
    if (out.empty())
      std::cout << md;
    else
      detail::write_text(out, md);
  } else {
    emit_or_write(to_json(rep), out);
  }
  return 0;
}

std::vector<GroundTruth> parse_gts(const json& j) {
  std::vector<GroundTruth> out;
  const json& arr = j.is_object() ? j.at("gts") : j;
  for (const auto& e : arr) out.push_back({e.at("bbox").get<BBox>(), e.value("class_index", 0)});
  return out;
}

std::vector<Prediction> parse_preds(const json& j) {
  std::vector<Prediction> out;
  const json& arr = j.is_object() ? j.at("preds") : j;
  for (const auto& e : arr) out.push_back({e.at("bbox").get<BBox>(), e.at("scores").get<std::vector<double>>()});
  return out;
}

int cmd_assign(const Globals& g, const std::string& gts, const std::string& preds, double tau, int t_cap,
               bool training_weights) {
  std::vector<GroundTruth> gt;
  std::vector<Prediction> pr;
  try {
    gt = parse_gts(detail::read_json(gts));
    pr = parse_preds(detail::read_json(preds));
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("assign input: ") + e.what());
  }
  const auto res = hybrid_assign(gt, pr, training_weights ? LossWeights::training() : LossWeights{}, tau, t_cap);
  if (g.pretty) {
    std::printf("%-6s %-6s %-8s %-8s\n", "gt", "pred", "origin", "iou");
    for (const auto& p : res.pairs)
      std::printf("%-6zu %-6zu %-8s %-8.4f\n", p.gt, p.pred, p.origin == PairOrigin::forced ? "forced" : "dynamic",
                  p.iou);
  } else {
    emit(json(res));
  }
  return 0;
}

int cmd_inject_noise(const Globals& g, const std::string& cube_path, double snr, std::uint64_t seed,
                     const std::string& out) {
  const HyperCube cube = read_cube(cube_path);
  Rng rng(seed);
  const HyperCube noisy = inject_noise(cube, snr, rng);
  write_cube(noisy, out);
  const auto snrs = band_snr_db(cube, noisy);
  if (g.pretty) {
    for (std::size_t b = 0; b < snrs.size(); ++b) std::printf("band %zu: %.3f dB\n", b, snrs[b]);
  } else {
    emit({{"out", out}, {"snr_db", snr}, {"seed", seed}, {"empirical_snr_db", snrs}});
  }
  return 0;
}

int cmd_kernel_check(const Globals& g) {
  const auto results = run_kernel_checks();
  bool ok = true;
  json arr = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    arr.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}});
    if (g.pretty)
      std::printf("%-36s %s  %s (%.3fs)\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.detail.c_str(), r.seconds);
  }
  if (!g.pretty) emit({{"passed", ok}, {"checks", arr}});
  return ok ? 0 : 1;
}

int cmd_report(const Globals& g, const std::string& dataset, const std::string& eval_json, const std::string& method,
               const std::string& threshold, const std::string& criterion, const std::string& out) {
  std::string md;
  if (!eval_json.empty()) {
    md = to_markdown(report_from_json(detail::read_json(eval_json)));
  } else {
    if (dataset.empty()) throw Error(Errc::invalid_argument, "report needs --dataset or --eval");
    BenchmarkOptions opt;
    opt.method = parse_htd_method(method);
    if (threshold != "auto") opt.threshold = std::stod(threshold);
    opt.eval.criterion = parse_criterion(criterion);
    opt.eval.workers = opt.htd.workers = resolve_workers(g.workers);
    const auto res = run_benchmark(dataset, opt);
    md = to_markdown(res.report, method);
    md += "\n### Thresholds\n\n| Class | Threshold |\n|---|---|\n";
    for (const auto& [cls, t] : res.thresholds) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "| C%d | %.2f |\n", cls, t);
      md += buf;
    }
    if (!out.empty()) {
      detail::write_json(fs::path(out) / "report.json", to_json(res.report));
      write_detections(res.detections, fs::path(out) / "detections.json");
    }
  }
  if (out.empty())
    std::cout << md;
  else
    detail::write_text(fs::path(out) / "report.md", md);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperspectral point-object detection toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_flag("--pretty", g.pretty, "Human-readable output");
  app.add_option("--workers", g.workers, "Worker threads (0 = logical cores)");

  const std::vector<std::string> methods{"cem", "smf", "osp", "asd", "tcimf"};

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
  std::string sim_config, sim_out;
  std::optional<std::uint64_t> sim_seed;
  sim->add_option("--config", sim_config, "Dataset config (JSON)")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", sim_out, "Output directory")->required();
  sim->add_option("--seed", sim_seed, "Override the config seed");

  auto* det = app.add_subcommand("detect", "Per-class score maps from a classic detector");
  std::string det_method = "cem", det_priors, det_cube, det_out, det_manifest;
  std::optional<int> win_in, win_out;
  det->add_option("--method", det_method, "Detector")->check(CLI::IsMember(methods));
  det->add_option("--priors", det_priors, "Prior spectra CSV")->required()->check(CLI::ExistingFile);
  det->add_option("--win-in", win_in, "Inner window size (odd)");
  det->add_option("--win-out", win_out, "Outer window size (odd)");
  det->add_option("--manifest", det_manifest, "Dataset manifest supplying per-class windows")->check(CLI::ExistingFile);
  det->add_option("--cube", det_cube, "Input cube")->required()->check(CLI::ExistingFile);
  det->add_option("--out", det_out, "Output directory")->required();

  auto* fwd = app.add_subcommand("forward", "Inference pass of the detection transformer");
  std::string fwd_cube, fwd_weights, fwd_config, fwd_out;
  std::optional<std::uint64_t> fwd_init;
  fwd->add_option("--cube", fwd_cube, "Input cube")->required()->check(CLI::ExistingFile);
  fwd->add_option("--weights", fwd_weights, "Weights directory")->required();
  fwd->add_option("--config", fwd_config, "Forward config (JSON)")->check(CLI::ExistingFile);
  fwd->add_option("--init-seed", fwd_init, "Write seeded random weights to --weights first");
  fwd->add_option("--out", fwd_out, "Write detections here instead of stdout");

  auto* s2o = app.add_subcommand("scores-to-objects", "Threshold score maps into detections");
  std::string s2o_scores, s2o_threshold = "auto", s2o_gt, s2o_out;
  int s2o_conn = 8;
  s2o->add_option("--scores", s2o_scores, "Directory of .scr score maps")->required()->check(CLI::ExistingDirectory);
  s2o->add_option("--threshold", s2o_threshold, "Threshold in [0,1] or 'auto'");
  s2o->add_option("--gt", s2o_gt, "Directory of ground-truth masks (needed for auto)")->check(CLI::ExistingDirectory);
  s2o->add_option("--connectivity", s2o_conn, "4 or 8")->check(CLI::IsMember({4, 8}));
  s2o->add_option("--out", s2o_out, "Write detections here instead of stdout");

  auto* ev = app.add_subcommand("eval", "Evaluate detections against ground truth");
  std::string ev_dets, ev_gts, ev_criterion = "coco", ev_report = "json", ev_out;
  std::size_t ev_max = defaults::kMaxDetsPerImage;
  bool ev_no_limit = false;
  ev->add_option("--dets", ev_dets, "Detections JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--gts", ev_gts, "Annotations JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--criterion", ev_criterion, "coco | iou25 | inner-outer");
  ev->add_option("--report", ev_report, "json | markdown")->check(CLI::IsMember({"json", "markdown"}));
  ev->add_option("--max-dets", ev_max, "Detections kept per image and class")->check(CLI::PositiveNumber);
  ev->add_flag("--no-recall-limit", ev_no_limit, "Recall at the loose IoU uses every detection");
  ev->add_option("--out", ev_out, "Write the report here instead of stdout");

  auto* as = app.add_subcommand("assign", "Hybrid label assignment for debugging");
  std::string as_gts, as_preds;
  double as_tau = defaults::kDynamicIouThreshold;
  int as_t = defaults::kDynamicCap;
  bool as_training = false;
  as->add_option("--gts", as_gts, "Ground-truth boxes JSON")->required()->check(CLI::ExistingFile);
  as->add_option("--preds", as_preds, "Predictions JSON")->required()->check(CLI::ExistingFile);
  as->add_option("--tau-iou", as_tau, "Dynamic IoU threshold");
  as->add_option("--t-cap", as_t, "Dynamic pairs per ground truth")->check(CLI::NonNegativeNumber);
  as->add_flag("--training-weights", as_training, "Use the training loss weights in the matching cost");

  auto* noise = app.add_subcommand("inject-noise", "Add Gaussian noise at a target SNR");
  std::string nz_cube, nz_out;
  double nz_snr = 0.0;
  std::uint64_t nz_seed = 0;
  noise->add_option("--cube", nz_cube, "Input cube")->required()->check(CLI::ExistingFile);
  noise->add_option("--snr-db", nz_snr, "Target SNR in dB")->required();
  noise->add_option("--seed", nz_seed, "Noise seed");
  noise->add_option("--out", nz_out, "Output cube")->required();

  auto* kc = app.add_subcommand("kernel-check", "Run the kernel invariant suite");

  auto* rep = app.add_subcommand("report", "Markdown result tables");
  std::string rep_dataset, rep_eval, rep_method = "cem", rep_threshold = "auto", rep_criterion = "coco", rep_out;
  rep->add_option("--dataset", rep_dataset, "Generated dataset directory (runs the pipeline)")
      ->check(CLI::ExistingDirectory);
  rep->add_option("--eval", rep_eval, "Existing evaluation report JSON")->check(CLI::ExistingFile);
  rep->add_option("--method", rep_method, "Detector")->check(CLI::IsMember(methods));
  rep->add_option("--threshold", rep_threshold, "Threshold in [0,1] or 'auto'");
  rep->add_option("--criterion", rep_criterion, "coco | iou25 | inner-outer");
  rep->add_option("--out", rep_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*sim) return cmd_simulate(g, sim_config, sim_out, sim_seed);
    if (*det) return cmd_detect(g, det_method, det_priors, win_in, win_out, det_manifest, det_cube, det_out);
    if (*fwd) return cmd_forward(g, fwd_cube, fwd_weights, fwd_config, fwd_init, fwd_out);
    if (*s2o) return cmd_scores_to_objects(g, s2o_scores, s2o_threshold, s2o_gt, s2o_conn, s2o_out);
    if (*ev) return cmd_eval(g, ev_dets, ev_gts, ev_criterion, ev_report, ev_max, ev_no_limit, ev_out);
    if (*as) return cmd_assign(g, as_gts, as_preds, as_tau, as_t, as_training);
    if (*noise) return cmd_inject_noise(g, nz_cube, nz_snr, nz_seed, nz_out);
    if (*kc) return cmd_kernel_check(g);
    if (*rep) return cmd_report(g, rep_dataset, rep_eval, rep_method, rep_threshold, rep_criterion, rep_out);
  } catch (const Error& e) {
    std::cerr << "error: " << errc_name(e.code()) << ": " << e.what() << "\n";
    return e.code() == Errc::invalid_argument ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
