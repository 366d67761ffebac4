#pragma once

// Object templates, linear-mixing injection and dataset generation.

#include <algorithm>
#include <cmath>
#include <compare>
#include <filesystem>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "box.hpp"
#include "defaults.hpp"
#include "hsicube.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "specmodel.hpp"

namespace hyperspod {

enum class TemplateKind { single, hybrid, combined };

inline std::string to_string(TemplateKind k) {
  switch (k) {
    case TemplateKind::single: return "single";
    case TemplateKind::hybrid: return "hybrid";
    case TemplateKind::combined: return "combined";
  }
  return "single";
}

inline TemplateKind parse_template_kind(const std::string& s) {
  if (s == "single") return TemplateKind::single;
  if (s == "hybrid") return TemplateKind::hybrid;
  if (s == "combined") return TemplateKind::combined;
  throw Error(Errc::invalid_argument, "unknown template kind '" + s + "'");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ObjectClassSpec {
  int class_id = 0;
  std::string name;
  TemplateKind kind = TemplateKind::single;
  std::vector<std::string> endmembers;
  int pixel_min = 1;
  int pixel_max = 1;
  Range max_abundance{1.0, 1.0};
  Range mixed_abundance{defaults::kSpodMixedAbundanceLo, 1.0};
  /// Objects of this class per image; unset means the class is drawn
  /// uniformly for each object of the image-level count.
  std::optional<std::pair<int, int>> count_per_image;
  /// Detector dual window (inner, outer) recorded in the manifest.
  std::optional<std::pair<int, int>> window;

  void validate() const {
    const std::string who = "class " + std::to_string(class_id);
    if (kind == TemplateKind::single && endmembers.size() != 1)
      throw Error(Errc::invalid_argument, who + ": single template needs exactly 1 endmember");
    if (kind != TemplateKind::single && endmembers.size() < 2)
      throw Error(Errc::invalid_argument, who + ": hybrid/combined template needs >= 2 endmembers");
    if (pixel_min < 1 || pixel_min > pixel_max)
      throw Error(Errc::invalid_argument, who + ": pixel range must satisfy 1 <= min <= max");
    for (const Range& r : {max_abundance, mixed_abundance})
      if (!(r.lo > 0.0 && r.lo <= r.hi && r.hi <= 1.0))
        throw Error(Errc::invalid_argument, who + ": abundance range must satisfy 0 < lo <= hi <= 1");
    if (count_per_image &&
        (count_per_image->first < 0 || count_per_image->first > count_per_image->second))
      throw Error(Errc::invalid_argument, who + ": count range must satisfy 0 <= lo <= hi");
  }
};

struct Offset {
  int dx = 0;
  int dy = 0;
  friend auto operator<=>(const Offset& a, const Offset& b) {
    return std::tie(a.dy, a.dx) <=> std::tie(b.dy, b.dx);
  }
  friend bool operator==(const Offset&, const Offset&) = default;
};

struct ObjectTemplate {
  int class_id = 0;
  std::vector<Offset> offsets;                  // min dx and min dy are 0
  std::vector<std::vector<double>> abundances;  // [pixel][endmember]

  double object_abundance(std::size_t i) const {
    double s = 0.0;
    for (double e : abundances[i]) s += e;
    return s;
  }
  int width() const {
    int m = 0;
    for (const auto& o : offsets) m = std::max(m, o.dx);
    return m + 1;
  }
  int height() const {
    int m = 0;
    for (const auto& o : offsets) m = std::max(m, o.dy);
    return m + 1;
  }
};

namespace detail {

inline void shift_to_origin(std::vector<Offset>& offsets) {
  int min_dx = offsets.front().dx, min_dy = offsets.front().dy;
  for (const auto& o : offsets) {
    min_dx = std::min(min_dx, o.dx);
    min_dy = std::min(min_dy, o.dy);
  }
  for (auto& o : offsets) {
    o.dx -= min_dx;
    o.dy -= min_dy;
  }
}

inline std::pair<double, double> centroid(const std::vector<Offset>& offsets) {
  double cx = 0.0, cy = 0.0;
  for (const auto& o : offsets) {
    cx += o.dx;
    cy += o.dy;
  }
  const auto n = static_cast<double>(offsets.size());
  return {cx / n, cy / n};
}

}  // namespace detail

/// Seeded accretion: start at the origin and repeatedly attach a uniformly
/// chosen 4-neighbor of the current blob. Offsets are returned sorted
/// row-major and shifted so the minimum dx and dy are 0.
inline std::vector<Offset> grow_template(int n_pixels, Rng& rng) {
  if (n_pixels < 1) throw Error(Errc::empty_template, "template needs at least one pixel");
  std::set<Offset> blob{{0, 0}};
  std::set<Offset> frontier{{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  while (static_cast<int>(blob.size()) < n_pixels) {
    auto it = frontier.begin();
    std::advance(it, rng.uniform_int(0, static_cast<std::int64_t>(frontier.size()) - 1));
    const Offset picked = *it;
    frontier.erase(it);
    blob.insert(picked);
    for (const Offset d : {Offset{1, 0}, Offset{-1, 0}, Offset{0, 1}, Offset{0, -1}}) {
      const Offset nb{picked.dx + d.dx, picked.dy + d.dy};
      if (!blob.contains(nb)) frontier.insert(nb);
    }
  }
  std::vector<Offset> out(blob.begin(), blob.end());
  detail::shift_to_origin(out);
  std::sort(out.begin(), out.end());
  return out;
}

/// A pixel is mixed when at least one of its 8 neighbors lies outside the template.
inline std::vector<bool> mixed_pixels(const std::vector<Offset>& offsets) {
  const std::set<Offset> in(offsets.begin(), offsets.end());
  std::vector<bool> mixed(offsets.size(), false);
  for (std::size_t i = 0; i < offsets.size(); ++i)
    for (int dy = -1; dy <= 1 && !mixed[i]; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if ((dx != 0 || dy != 0) && !in.contains({offsets[i].dx + dx, offsets[i].dy + dy})) {
          mixed[i] = true;
          break;
        }
  return mixed;
}

/// Per-pixel object abundance and its split among the class endmembers.
///
/// Interior pixels are pure. Mixed pixels take values from the mixed range,
/// sorted so that pixels closer to the centroid get larger values. When every
/// pixel is mixed the pixel nearest the centroid draws from the maximum range
/// and the remaining values are capped by it, which keeps the ordering.
inline ObjectTemplate assign_abundances(std::vector<Offset> offsets, const ObjectClassSpec& spec,
                                        Rng& rng) {
  if (offsets.empty()) throw Error(Errc::empty_template, "no offsets");
  spec.validate();
  const std::size_t n = offsets.size();
  const auto [cx, cy] = detail::centroid(offsets);
  const auto mixed = mixed_pixels(offsets);

  std::vector<std::size_t> mixed_idx;
  for (std::size_t i = 0; i < n; ++i)
    if (mixed[i]) mixed_idx.push_back(i);
  auto dist2 = [&](std::size_t i) {
    const double ex = offsets[i].dx - cx, ey = offsets[i].dy - cy;
    return ex * ex + ey * ey;
  };
  std::stable_sort(mixed_idx.begin(), mixed_idx.end(),
                   [&](std::size_t a, std::size_t b) { return dist2(a) < dist2(b); });

  std::vector<double> total(n, 1.0);
  const auto m = mixed_idx.size();
  std::vector<double> values;
  values.reserve(m);
  if (m == n) {
    const double top = rng.uniform(spec.max_abundance.lo, spec.max_abundance.hi);
    values.push_back(top);
    const double lo = std::min(spec.mixed_abundance.lo, top);
    const double hi = std::min(spec.mixed_abundance.hi, top);
    for (std::size_t k = 1; k < m; ++k) values.push_back(rng.uniform(lo, hi));
  } else {
    for (std::size_t k = 0; k < m; ++k)
      values.push_back(rng.uniform(spec.mixed_abundance.lo, spec.mixed_abundance.hi));
  }
  std::sort(values.begin(), values.end(), std::greater<>());
  for (std::size_t k = 0; k < m; ++k) total[mixed_idx[k]] = values[k];

  const std::size_t k_end = spec.endmembers.size();
  ObjectTemplate t;
  t.class_id = spec.class_id;
  t.abundances.assign(n, std::vector<double>(k_end, 0.0));
  switch (spec.kind) {
    case TemplateKind::single:
      for (std::size_t i = 0; i < n; ++i) t.abundances[i][0] = total[i];
      break;
    case TemplateKind::hybrid:
      // Uniform point on the simplex via normalized exponentials.
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> w(k_end);
        double sum = 0.0;
        for (auto& x : w) sum += (x = -std::log(rng.uniform_open()));
        for (std::size_t e = 0; e < k_end; ++e) t.abundances[i][e] = total[i] * w[e] / sum;
      }
      break;
    case TemplateKind::combined: {
      // Angular sectors around the centroid, starting at a random angle.
      const double start = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double sector = 2.0 * std::numbers::pi / static_cast<double>(k_end);
      for (std::size_t i = 0; i < n; ++i) {
        double ang = std::atan2(offsets[i].dy - cy, offsets[i].dx - cx) - start;
        ang = std::fmod(ang + 4.0 * std::numbers::pi, 2.0 * std::numbers::pi);
        const auto e = std::min(k_end - 1, static_cast<std::size_t>(ang / sector));
        t.abundances[i][e] = total[i];
      }
      break;
    }
  }
  t.offsets = std::move(offsets);
  return t;
}

/// Tight box around the template placed with its origin at (col, row).
inline BBox template_box(const ObjectTemplate& t, int col, int row) {
  return BBox::from_pixel_range(col, row, col + t.width() - 1, row + t.height() - 1);
}

/// Linear mixing in place: new = sum_k e_k * spectrum_k + (1 - sum_k e_k) * old.
/// `spectrum(pixel_index, endmember_index)` returns the endmember spectrum
/// used at that template pixel.
template <typename SpectrumFn>
Annotation inject_into(HyperCube& cube, const ObjectTemplate& t, SpectrumFn&& spectrum, int col,
                       int row) {
  if (t.offsets.empty()) throw Error(Errc::empty_template, "no offsets");
  if (col < 0 || row < 0 || col + t.width() > static_cast<int>(cube.width()) ||
      row + t.height() > static_cast<int>(cube.height()))
    throw Error(Errc::out_of_bounds, "template does not fit at (" + std::to_string(col) + ", " +
                                         std::to_string(row) + ")");
  const std::size_t bands = cube.bands();
  std::vector<double> mixed(bands);
  for (std::size_t i = 0; i < t.offsets.size(); ++i) {
    const auto r = static_cast<std::size_t>(row + t.offsets[i].dy);
    const auto c = static_cast<std::size_t>(col + t.offsets[i].dx);
    const double obj = t.object_abundance(i);
    for (std::size_t b = 0; b < bands; ++b) mixed[b] = (1.0 - obj) * cube.at(r, c, b);
    for (std::size_t e = 0; e < t.abundances[i].size(); ++e) {
      const double ab = t.abundances[i][e];
      if (ab == 0.0) continue;
      const auto& s = spectrum(i, e);
      if (s.size() != bands) throw Error(Errc::length_mismatch, "endmember spectrum length");
      for (std::size_t b = 0; b < bands; ++b) mixed[b] += ab * s[b];
    }
    cube.set_pixel(r, c, mixed);
  }
  return Annotation{template_box(t, col, row), t.class_id, 0};
}

/// Functional form with one spectrum per endmember for every pixel.
inline std::pair<HyperCube, Annotation> inject(const HyperCube& cube, const ObjectTemplate& t,
                                               const std::vector<std::vector<double>>& spectra,
                                               int col, int row) {
  HyperCube out = cube;
  for (const auto& px : t.abundances)
    if (px.size() != spectra.size())
      throw Error(Errc::length_mismatch, "template endmember count differs from spectra");
  auto ann = inject_into(
      out, t, [&](std::size_t, std::size_t e) -> const std::vector<double>& { return spectra[e]; },
      col, row);
  return {std::move(out), ann};
}

/// Marks the template pixels in `mask`.
inline void rasterize_template(BinaryMask& mask, const ObjectTemplate& t, int col, int row) {
  for (const auto& o : t.offsets)
    mask.set(static_cast<std::size_t>(row + o.dy), static_cast<std::size_t>(col + o.dx));
}

// ---------------------------------------------------------------------------
// Backgrounds

struct BackgroundParams {
  Unit unit = Unit::radiance;
  Range level{800.0, 2500.0};  // peak of each class mean spectrum
  double gamma = 0.03;         // per-band coefficient of variation
  double sigma_a = 0.6;
  double sigma_v = 0.8;
  int seeds_per_class = 2;
};

inline std::vector<double> default_wavelengths(std::size_t bands) {
  std::vector<double> wl(bands);
  for (std::size_t b = 0; b < bands; ++b)
    wl[b] = bands > 1 ? 400.0 + 2100.0 * static_cast<double>(b) / static_cast<double>(bands - 1)
                      : 400.0;
  return wl;
}

/// Piecewise-smooth synthetic scene: Voronoi regions, each assigned one of
/// `n_classes` mean spectra, plus per-pixel fluctuation with b = 0.
inline HyperCube synth_background(std::size_t h, std::size_t w, std::size_t bands,
                                  std::size_t n_classes, Rng& rng,
                                  const BackgroundParams& p = {}) {
  if (h == 0 || w == 0 || bands == 0 || n_classes == 0)
    throw Error(Errc::invalid_argument, "background sizes must be >= 1");
  std::vector<std::vector<double>> means(n_classes);
  for (auto& m : means) {
    m = synthetic_reflectance(bands, rng);
    if (p.unit == Unit::radiance) {
      const double peak = *std::max_element(m.begin(), m.end());
      const double level = rng.uniform(p.level.lo, p.level.hi);
      for (double& v : m) v *= level / peak;
    }
  }
  const std::size_t n_seeds = n_classes * static_cast<std::size_t>(std::max(1, p.seeds_per_class));
  std::vector<std::pair<double, double>> seeds(n_seeds);
  for (auto& s : seeds) s = {rng.uniform(0.0, static_cast<double>(w)), rng.uniform(0.0, static_cast<double>(h))};

  const auto stats = SpectrumStats::from_parameters(std::vector<double>(bands, p.gamma), p.sigma_a,
                                                    std::vector<double>(bands, p.sigma_v));
  HyperCube cube(h, w, bands, std::vector<float>(h * w * bands, 0.0f), p.unit,
                 default_wavelengths(bands));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < n_seeds; ++s) {
        const double dx = c + 0.5 - seeds[s].first, dy = r + 0.5 - seeds[s].second;
        const double d = dx * dx + dy * dy;
        if (d < best_d) best_d = d, best = s;
      }
      auto px = simulate_spectrum(stats, means[best % n_classes], 0.0, rng);
      if (p.unit == Unit::reflectance)
        for (double& v : px) v = std::clamp(v, 0.0, 1.0);
      cube.set_pixel(r, c, px);
    }
  return cube;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct EndmemberSource {
  std::string name;
  std::vector<double> reflectance;  // converted through the reference pair
  std::vector<double> radiance;     // used as the baseline directly
};

struct SplitSpec {
  std::string name;
  std::size_t images = 0;
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t bands = 16;
  Unit unit = Unit::radiance;
  std::vector<SplitSpec> splits{{"train", 20}, {"test", 10}};

  std::size_t background_classes = 4;
  BackgroundParams background;
  std::vector<std::filesystem::path> background_files;  // replaces synthesis when set

  SpectrumStats fluctuation;
  Range peak_scale{defaults::kEndmemberMaxLo, defaults::kEndmemberMaxHi};
  std::pair<int, int> objects_per_image{defaults::kMinObjectsPerImage,
                                        defaults::kMaxObjectsPerImage};
  int placement_retries = defaults::kPlacementRetries;
  std::vector<double> reference_reflectance;  // r_w; empty means all ones
  std::vector<double> reference_radiance;     // s_w; empty means all ones
  std::vector<EndmemberSource> endmembers;
  std::vector<ObjectClassSpec> classes;

  void validate() const {
    if (classes.empty()) throw Error(Errc::invalid_argument, "dataset has no classes");
    if (objects_per_image.first < 0 || objects_per_image.first > objects_per_image.second)
      throw Error(Errc::invalid_argument, "objects_per_image must satisfy 0 <= lo <= hi");
    if (static_cast<std::size_t>(objects_per_image.second) > height * width)
      throw Error(Errc::invalid_argument, "objects_per_image exceeds the pixel count");
    if (fluctuation.bands() != bands)
      throw Error(Errc::length_mismatch, "fluctuation stats do not match the band count");
    for (const auto& c : classes) {
      c.validate();
      for (const auto& e : c.endmembers)
        if (std::none_of(endmembers.begin(), endmembers.end(),
                         [&](const auto& s) { return s.name == e; }))
          throw Error(Errc::invalid_argument, "class " + std::to_string(c.class_id) +
                                                  " uses unknown endmember '" + e + "'");
    }
  }
};

namespace detail {

inline Range parse_range(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 2) throw Error(Errc::invalid_argument, "range must have two entries");
  return {v[0], v[1]};
}

inline std::vector<double> per_band(const json& j, std::size_t bands, const char* what) {
  if (j.is_number()) return std::vector<double>(bands, j.get<double>());
  auto v = j.get<std::vector<double>>();
  if (v.size() != bands)
    throw Error(Errc::length_mismatch, std::string(what) + " has " + std::to_string(v.size()) +
                                           " entries, expected " + std::to_string(bands));
  return v;
}

inline std::vector<double> spectrum_field(const json& j, std::size_t bands,
                                          const std::filesystem::path& base, const char* what) {
  if (j.is_string()) {
    auto csv = read_endmember_csv(base / j.get<std::string>());
    if (csv.values.size() != bands)
      throw Error(Errc::length_mismatch, std::string(what) + " csv band count");
    return csv.values;
  }
  return per_band(j, bands, what);
}

}  // namespace detail

/// Reads a dataset config object. Relative file paths resolve against `base`.
inline DatasetConfig parse_dataset_config(const json& j, const std::filesystem::path& base = {}) {
  DatasetConfig cfg;
  try {
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.height = j.value("height", cfg.height);
    cfg.width = j.value("width", cfg.width);
    cfg.bands = j.value("bands", cfg.bands);
    cfg.unit = parse_unit(j.value("unit", std::string("radiance")));
    if (j.contains("splits")) {
      cfg.splits.clear();
      for (const auto& [name, count] : j.at("splits").items())
        cfg.splits.push_back({name, count.get<std::size_t>()});
      // "train" before "test" regardless of key order.
      std::stable_sort(cfg.splits.begin(), cfg.splits.end(), [](const auto& a, const auto& b) {
        return (a.name == "train") > (b.name == "train");
      });
    }

    cfg.background.unit = cfg.unit;
    if (j.contains("background")) {
      const auto& bg = j.at("background");
      if (bg.contains("files")) {
        for (const auto& f : bg.at("files")) cfg.background_files.push_back(base / f.get<std::string>());
      }
      cfg.background_classes = bg.value("classes", cfg.background_classes);
      if (bg.contains("level")) cfg.background.level = detail::parse_range(bg.at("level"));
      cfg.background.gamma = bg.value("gamma", cfg.background.gamma);
      cfg.background.sigma_a = bg.value("sigma_a", cfg.background.sigma_a);
      cfg.background.sigma_v = bg.value("sigma_v", cfg.background.sigma_v);
      cfg.background.seeds_per_class = bg.value("seeds_per_class", cfg.background.seeds_per_class);
    }
    if (!cfg.background_files.empty()) {
      const auto first = read_cube(cfg.background_files.front());
      cfg.height = first.height();
      cfg.width = first.width();
      cfg.bands = first.bands();
      cfg.unit = first.unit();
    }

    const json fl = j.value("fluctuation", json::object());
    if (fl.contains("stats_file")) {
      cfg.fluctuation = read_stats(base / fl.at("stats_file").get<std::string>());
    } else {
      cfg.fluctuation = SpectrumStats::from_parameters(
          detail::per_band(fl.value("gamma", json(0.02)), cfg.bands, "fluctuation.gamma"),
          fl.value("sigma_a", 0.6),
          detail::per_band(fl.value("sigma_v", json(0.8)), cfg.bands, "fluctuation.sigma_v"));
    }

    if (j.contains("peak_scale")) cfg.peak_scale = detail::parse_range(j.at("peak_scale"));
    if (j.contains("objects_per_image")) {
      const auto r = j.at("objects_per_image").get<std::vector<int>>();
      if (r.size() != 2) throw Error(Errc::invalid_argument, "objects_per_image needs [lo, hi]");
      cfg.objects_per_image = {r[0], r[1]};
    }
    cfg.placement_retries = j.value("placement_retries", cfg.placement_retries);
    if (j.contains("reference")) {
      const auto& ref = j.at("reference");
      if (ref.contains("reflectance"))
        cfg.reference_reflectance =
            detail::spectrum_field(ref.at("reflectance"), cfg.bands, base, "reference.reflectance");
      if (ref.contains("radiance"))
        cfg.reference_radiance =
            detail::spectrum_field(ref.at("radiance"), cfg.bands, base, "reference.radiance");
    }

    for (const auto& e : j.at("endmembers")) {
      EndmemberSource src;
      src.name = e.at("name").get<std::string>();
      if (e.contains("reflectance"))
        src.reflectance = detail::spectrum_field(e.at("reflectance"), cfg.bands, base, "reflectance");
      if (e.contains("radiance"))
        src.radiance = detail::spectrum_field(e.at("radiance"), cfg.bands, base, "radiance");
      cfg.endmembers.push_back(std::move(src));
    }

    for (const auto& c : j.at("classes")) {
      ObjectClassSpec spec;
      spec.class_id = c.at("id").get<int>();
      spec.name = c.value("name", "C" + std::to_string(spec.class_id));
      spec.kind = parse_template_kind(c.value("kind", std::string("single")));
      spec.endmembers = c.at("endmembers").get<std::vector<std::string>>();
      const auto px = c.at("pixels").get<std::vector<int>>();
      if (px.size() != 2) throw Error(Errc::invalid_argument, "pixels needs [lo, hi]");
      spec.pixel_min = px[0];
      spec.pixel_max = px[1];
      if (c.contains("max_abundance")) spec.max_abundance = detail::parse_range(c.at("max_abundance"));
      if (c.contains("mixed_abundance"))
        spec.mixed_abundance = detail::parse_range(c.at("mixed_abundance"));
      if (c.contains("count")) {
        const auto n = c.at("count").get<std::vector<int>>();
        if (n.size() != 2) throw Error(Errc::invalid_argument, "count needs [lo, hi]");
        spec.count_per_image = std::pair{n[0], n[1]};
      }
      if (c.contains("window")) {
        const auto w = c.at("window").get<std::vector<int>>();
        if (w.size() != 2) throw Error(Errc::invalid_argument, "window needs [inner, outer]");
        spec.window = std::pair{w[0], w[1]};
      }
      cfg.classes.push_back(std::move(spec));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("dataset config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline DatasetConfig load_dataset_config(const std::filesystem::path& path) {
  return parse_dataset_config(detail::read_json(path), path.parent_path());
}

struct ResolvedEndmember {
  std::string name;
  double peak = 0.0;  // M_t, or 0 when the radiance was given directly
  std::vector<double> baseline;
};

/// Fixes the baseline spectrum of every endmember. Missing curves are
/// synthesized; M_t is drawn once per endmember. Reflectance-unit datasets
/// use the reflectance curve directly.
inline std::vector<ResolvedEndmember> resolve_endmembers(const DatasetConfig& cfg) {
  Rng rng = Rng::derive(cfg.seed, 0xE2D3E3BE5ULL);
  const std::vector<double> ones(cfg.bands, 1.0);
  const auto& r_w = cfg.reference_reflectance.empty() ? ones : cfg.reference_reflectance;
  const auto& s_w = cfg.reference_radiance.empty() ? ones : cfg.reference_radiance;
  std::vector<ResolvedEndmember> out;
  for (const auto& src : cfg.endmembers) {
    ResolvedEndmember e;
    e.name = src.name;
    if (!src.radiance.empty()) {
      e.baseline = src.radiance;
    } else {
      const auto r_t = src.reflectance.empty() ? synthetic_reflectance(cfg.bands, rng) : src.reflectance;
      if (cfg.unit == Unit::reflectance) {
        e.baseline = r_t;
      } else {
        e.peak = rng.uniform(cfg.peak_scale.lo, cfg.peak_scale.hi);
        e.baseline = reflectance_to_radiance(r_t, r_w, s_w, e.peak, e.name).radiance_baseline;
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

struct PlacedObject {
  ObjectTemplate tmpl;
  int col = 0;
  int row = 0;
  Annotation annotation;
};

struct SynthImage {
  HyperCube cube;
  std::vector<PlacedObject> objects;
  int skipped = 0;  // objects dropped after exhausting the placement retries
};

/// Places objects into `background` with the image's own random stream.
/// A placement is rejected when the candidate box, grown by one pixel on
/// each side, overlaps an existing box; this keeps every object a separate
/// 8-connected component.
inline SynthImage synthesize_image(const DatasetConfig& cfg,
                                   const std::vector<ResolvedEndmember>& endmembers,
                                   HyperCube background, Rng& rng) {
  std::vector<const ObjectClassSpec*> roster;
  const bool per_class = std::any_of(cfg.classes.begin(), cfg.classes.end(),
                                     [](const auto& c) { return c.count_per_image.has_value(); });
  if (per_class) {
    for (const auto& c : cfg.classes) {
      if (!c.count_per_image) continue;
      const auto n = rng.uniform_int(c.count_per_image->first, c.count_per_image->second);
      for (std::int64_t k = 0; k < n; ++k) roster.push_back(&c);
    }
  } else {
    const auto n = rng.uniform_int(cfg.objects_per_image.first, cfg.objects_per_image.second);
    for (std::int64_t k = 0; k < n; ++k)
      roster.push_back(&cfg.classes[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(cfg.classes.size()) - 1))]);
  }

  SynthImage img{std::move(background), {}, 0};
  const int H = static_cast<int>(img.cube.height());
  const int W = static_cast<int>(img.cube.width());
  for (const ObjectClassSpec* spec : roster) {
    const auto n_px = static_cast<int>(rng.uniform_int(spec->pixel_min, spec->pixel_max));
    ObjectTemplate t = assign_abundances(grow_template(n_px, rng), *spec, rng);
    std::optional<std::pair<int, int>> pos;
    if (t.width() <= W && t.height() <= H) {
      for (int attempt = 0; attempt < cfg.placement_retries && !pos; ++attempt) {
        const auto col = static_cast<int>(rng.uniform_int(0, W - t.width()));
        const auto row = static_cast<int>(rng.uniform_int(0, H - t.height()));
        const BBox box = template_box(t, col, row);
        const BBox grown{box.cx, box.cy, box.w + 2.0, box.h + 2.0};
        const bool clash = std::any_of(img.objects.begin(), img.objects.end(), [&](const auto& o) {
          return intersects(grown, o.annotation.box);
        });
        if (!clash) pos = {col, row};
      }
    }
    if (!pos) {
      ++img.skipped;
      continue;
    }

    std::vector<const std::vector<double>*> baselines;
    for (const auto& name : spec->endmembers)
      baselines.push_back(&std::find_if(endmembers.begin(), endmembers.end(), [&](const auto& e) {
                             return e.name == name;
                           })->baseline);
    const double b = rng.uniform(defaults::kWideAreaFactorLo, defaults::kWideAreaFactorHi);
    std::vector<std::vector<std::vector<double>>> spectra(t.offsets.size());
    for (std::size_t i = 0; i < t.offsets.size(); ++i) {
      spectra[i].resize(baselines.size());
      for (std::size_t e = 0; e < baselines.size(); ++e)
        if (t.abundances[i][e] > 0.0)
          spectra[i][e] = simulate_spectrum(cfg.fluctuation, *baselines[e], b, rng);
    }
    Annotation ann = inject_into(
        img.cube, t,
        [&](std::size_t i, std::size_t e) -> const std::vector<double>& { return spectra[i][e]; },
        pos->first, pos->second);
    ann.instance_id = static_cast<int>(img.objects.size()) + 1;
    img.objects.push_back({std::move(t), pos->first, pos->second, ann});
  }
  if (img.cube.unit() == Unit::reflectance) {
    for (std::size_t r = 0; r < img.cube.height(); ++r)
      for (std::size_t c = 0; c < img.cube.width(); ++c)
        for (std::size_t b = 0; b < img.cube.bands(); ++b)
          img.cube.at(r, c, b) = std::clamp(img.cube.at(r, c, b), 0.0f, 1.0f);
  }
  return img;
}

inline std::string image_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%04zu", index);
  return buf;
}

inline std::string mask_name(std::size_t index, int class_id) {
  return image_stem(index) + "_c" + std::to_string(class_id) + ".msk";
}

inline std::uint64_t image_stream(std::size_t split_index, std::size_t image_index) {
  return (static_cast<std::uint64_t>(split_index + 1) << 32) | image_index;
}

/// Writes every split to `out_dir` and returns the manifest (also written as
/// manifest.json). Layout per split: <split>/img_NNNN.hsc (+ .json header),
/// <split>/masks/img_NNNN_c<id>.msk for every class, <split>/annotations.json.
/// Shared files: endmembers/<name>.csv, priors.csv.
inline json generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir,
                             unsigned workers = 1) {
  cfg.validate();
  namespace fs = std::filesystem;
  const auto endmembers = resolve_endmembers(cfg);
  std::vector<HyperCube> backgrounds;
  for (const auto& f : cfg.background_files) {
    backgrounds.push_back(read_cube(f));
    const auto& b = backgrounds.back();
    if (b.height() != cfg.height || b.width() != cfg.width || b.bands() != cfg.bands)
      throw Error(Errc::shape_mismatch, f.string() + " differs in shape from the first background");
  }
  const auto wavelengths =
      backgrounds.empty() ? default_wavelengths(cfg.bands) : backgrounds.front().wavelengths();

  std::vector<Category> categories;
  json windows = json::object();
  for (const auto& c : cfg.classes) {
    categories.push_back({c.class_id, c.name});
    if (c.window) windows[std::to_string(c.class_id)] = {c.window->first, c.window->second};
  }

  json manifest{{"seed", cfg.seed},
                {"height", cfg.height},
                {"width", cfg.width},
                {"bands", cfg.bands},
                {"unit", to_string(cfg.unit)},
                {"categories", categories},
                {"priors", "priors.csv"},
                {"windows", windows}};

  PriorSpectra priors;
  json em_json = json::array();
  for (const auto& e : endmembers) {
    const std::string file = "endmembers/" + e.name + ".csv";
    write_endmember_csv(wavelengths.empty() ? default_wavelengths(cfg.bands) : wavelengths,
                        e.baseline, out_dir / file);
    em_json.push_back({{"name", e.name}, {"peak", e.peak}, {"file", file}});
  }
  manifest["endmembers"] = em_json;
  for (const auto& c : cfg.classes)
    for (const auto& name : c.endmembers)
      for (const auto& e : endmembers)
        if (e.name == name) priors.add(c.class_id, e.baseline);
  write_priors_csv(priors, out_dir / "priors.csv");

  json splits = json::object();
  for (std::size_t si = 0; si < cfg.splits.size(); ++si) {
    const auto& split = cfg.splits[si];
    const fs::path dir = out_dir / split.name;
    std::vector<std::vector<Annotation>> per_image(split.images);
    std::vector<json> records(split.images);
    parallel_for(split.images, workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const auto stream = image_stream(si, i);
        Rng rng = Rng::derive(cfg.seed, stream);
        HyperCube bg = backgrounds.empty()
                           ? synth_background(cfg.height, cfg.width, cfg.bands,
                                              cfg.background_classes, rng, cfg.background)
                           : backgrounds[i % backgrounds.size()];
        SynthImage img = synthesize_image(cfg, endmembers, std::move(bg), rng);
        const std::string file = image_stem(i) + ".hsc";
        write_cube(img.cube, dir / file);
        json masks = json::object();
        for (const auto& c : cfg.classes) {
          BinaryMask m = BinaryMask::empty(cfg.height, cfg.width, c.class_id);
          for (const auto& o : img.objects)
            if (o.tmpl.class_id == c.class_id) rasterize_template(m, o.tmpl, o.col, o.row);
          const std::string mfile = split.name + "/masks/" + mask_name(i, c.class_id);
          write_mask(m, out_dir / mfile);
          masks[std::to_string(c.class_id)] = mfile;
        }
        for (const auto& o : img.objects) per_image[i].push_back(o.annotation);
        records[i] = json{{"id", i},
                          {"file", split.name + "/" + file},
                          {"rng_stream", stream},
                          {"objects", img.objects.size()},
                          {"skipped", img.skipped},
                          {"masks", masks}};
      }
    });
    AnnotationSet set;
    set.categories = categories;
    for (std::size_t i = 0; i < split.images; ++i) {
      set.images.push_back({static_cast<int>(i), image_stem(i) + ".hsc",
                            static_cast<int>(cfg.height), static_cast<int>(cfg.width)});
      for (const auto& a : per_image[i]) set.annotations.push_back({static_cast<int>(i), a});
    }
    write_annotations(set, dir / "annotations.json");
    splits[split.name] = {{"annotations", split.name + "/annotations.json"}, {"images", records}};
  }
  manifest["splits"] = splits;
  detail::write_json(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace hyperspod
