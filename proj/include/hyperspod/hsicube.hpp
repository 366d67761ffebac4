#pragma once

// Core data model: hyperspectral cubes, per-class score maps and masks,
// annotation/detection sets, and their on-disk formats.
//
// Raw rasters (cubes, score maps, masks) are stored as little-endian float32
// in band-sequential order (all of band 0, then band 1, ...), each band
// row-major. A JSON sidecar named "<raw path>.json" carries the shape.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "box.hpp"
#include "error.hpp"

namespace hyperspod {

using json = nlohmann::json;

enum class Unit { radiance, reflectance };

inline std::string to_string(Unit u) { return u == Unit::radiance ? "radiance" : "reflectance"; }

inline Unit parse_unit(const std::string& s) {
  if (s == "radiance") return Unit::radiance;
  if (s == "reflectance") return Unit::reflectance;
  throw Error(Errc::malformed_header, "unknown unit '" + s + "'");
}

/// Sensor overshoot tolerated above 1 for reflectance data.
inline constexpr double kReflectanceOvershoot = 0.05;

class HyperCube {
 public:
  HyperCube() = default;

  HyperCube(std::size_t height, std::size_t width, std::size_t bands, std::vector<float> data,
            Unit unit = Unit::radiance, std::vector<double> wavelengths = {})
      : height_(height),
        width_(width),
        bands_(bands),
        data_(std::move(data)),
        unit_(unit),
        wavelengths_(std::move(wavelengths)) {
    if (data_.size() != height_ * width_ * bands_)
      throw Error(Errc::size_mismatch, "data length " + std::to_string(data_.size()) +
                                           " != " + std::to_string(height_ * width_ * bands_));
    if (!wavelengths_.empty() && wavelengths_.size() != bands_)
      throw Error(Errc::size_mismatch, "wavelength count does not match band count");
    for (float v : data_)
      if (!std::isfinite(v)) throw Error(Errc::non_finite_sample, "cube contains NaN/Inf");
  }

  static HyperCube filled(std::size_t height, std::size_t width, std::size_t bands, float value,
                          Unit unit = Unit::radiance) {
    return HyperCube(height, width, bands, std::vector<float>(height * width * bands, value), unit);
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t bands() const { return bands_; }
  std::size_t pixels() const { return height_ * width_; }
  Unit unit() const { return unit_; }
  const std::vector<double>& wavelengths() const { return wavelengths_; }
  const std::vector<float>& data() const { return data_; }

  std::span<const float> band(std::size_t b) const {
    return {data_.data() + b * pixels(), pixels()};
  }
  std::span<float> band(std::size_t b) { return {data_.data() + b * pixels(), pixels()}; }

  float at(std::size_t row, std::size_t col, std::size_t b) const {
    return data_[b * pixels() + row * width_ + col];
  }
  float& at(std::size_t row, std::size_t col, std::size_t b) {
    return data_[b * pixels() + row * width_ + col];
  }

  std::vector<double> pixel(std::size_t row, std::size_t col) const {
    std::vector<double> out(bands_);
    for (std::size_t b = 0; b < bands_; ++b) out[b] = at(row, col, b);
    return out;
  }

  void set_pixel(std::size_t row, std::size_t col, std::span<const double> spectrum) {
    if (spectrum.size() != bands_) throw Error(Errc::length_mismatch, "spectrum length");
    for (std::size_t b = 0; b < bands_; ++b) {
      const auto v = static_cast<float>(spectrum[b]);
      if (!std::isfinite(v)) throw Error(Errc::non_finite_sample, "non-finite sample written");
      at(row, col, b) = v;
    }
  }

  /// Full invariant check, including the reflectance range.
  void validate() const {
    if (data_.size() != height_ * width_ * bands_) throw Error(Errc::size_mismatch, "data length");
    for (float v : data_) {
      if (!std::isfinite(v)) throw Error(Errc::non_finite_sample, "cube contains NaN/Inf");
      if (unit_ == Unit::reflectance && (v < 0.0f || v > 1.0 + kReflectanceOvershoot))
        throw Error(Errc::invalid_argument, "reflectance sample outside [0, 1.05]");
    }
  }

  friend bool operator==(const HyperCube&, const HyperCube&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t bands_ = 0;
  std::vector<float> data_;
  Unit unit_ = Unit::radiance;
  std::vector<double> wavelengths_;
};

struct ScoreMap {
  std::size_t height = 0;
  std::size_t width = 0;
  int class_id = 0;
  std::vector<float> scores;  // row-major

  float at(std::size_t row, std::size_t col) const { return scores[row * width + col]; }

  void validate() const {
    if (scores.size() != height * width) throw Error(Errc::size_mismatch, "score map length");
    for (float v : scores)
      if (!std::isfinite(v)) throw Error(Errc::non_finite_sample, "score map contains NaN/Inf");
  }

  friend bool operator==(const ScoreMap&, const ScoreMap&) = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  int class_id = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  static BinaryMask empty(std::size_t height, std::size_t width, int class_id) {
    return {height, width, class_id, std::vector<std::uint8_t>(height * width, 0)};
  }

  bool at(std::size_t row, std::size_t col) const { return bits[row * width + col] != 0; }
  void set(std::size_t row, std::size_t col, bool v = true) { bits[row * width + col] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct Annotation {
  BBox box;
  int class_id = 0;
  int instance_id = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Detection {
  BBox box;
  int class_id = 0;
  double confidence = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct ImageInfo {
  int id = 0;
  std::string file;
  int height = 0;
  int width = 0;
  friend bool operator==(const ImageInfo&, const ImageInfo&) = default;
};

struct Category {
  int id = 0;
  std::string name;
  friend bool operator==(const Category&, const Category&) = default;
};

struct ImageAnnotation {
  int image_id = 0;
  Annotation annotation;
  friend bool operator==(const ImageAnnotation&, const ImageAnnotation&) = default;
};

struct ImageDetection {
  int image_id = 0;
  Detection detection;
  friend bool operator==(const ImageDetection&, const ImageDetection&) = default;
};

/// Ground-truth file contents (COCO-like).
struct AnnotationSet {
  std::vector<ImageInfo> images;
  std::vector<Category> categories;
  std::vector<ImageAnnotation> annotations;
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

/// Prediction file contents.
struct DetectionSet {
  std::vector<ImageInfo> images;
  std::vector<Category> categories;
  std::vector<ImageDetection> detections;
  friend bool operator==(const DetectionSet&, const DetectionSet&) = default;
};

// ---------------------------------------------------------------------------
// JSON mapping

inline void to_json(json& j, const BBox& b) { j = json::array({b.cx, b.cy, b.w, b.h}); }
inline void from_json(const json& j, BBox& b) {
  if (!j.is_array() || j.size() != 4) throw Error(Errc::malformed_header, "bbox must be [cx,cy,w,h]");
  b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline void to_json(json& j, const ImageInfo& i) {
  j = json{{"id", i.id}, {"file", i.file}, {"height", i.height}, {"width", i.width}};
}
inline void from_json(const json& j, ImageInfo& i) {
  i.id = j.at("id").get<int>();
  i.file = j.value("file", std::string{});
  i.height = j.value("height", 0);
  i.width = j.value("width", 0);
}

inline void to_json(json& j, const Category& c) { j = json{{"id", c.id}, {"name", c.name}}; }
inline void from_json(const json& j, Category& c) {
  c.id = j.at("id").get<int>();
  c.name = j.value("name", std::string{});
}

inline json annotations_to_json(const AnnotationSet& set) {
  auto sorted = set.annotations;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return std::tie(a.image_id, a.annotation.instance_id) <
           std::tie(b.image_id, b.annotation.instance_id);
  });
  json anns = json::array();
  for (const auto& a : sorted)
    anns.push_back({{"image_id", a.image_id},
                    {"instance_id", a.annotation.instance_id},
                    {"category_id", a.annotation.class_id},
                    {"bbox", a.annotation.box}});
  return json{{"images", set.images}, {"categories", set.categories}, {"annotations", anns}};
}

inline AnnotationSet annotations_from_json(const json& j) {
  AnnotationSet set;
  try {
    set.images = j.at("images").get<std::vector<ImageInfo>>();
    set.categories = j.value("categories", std::vector<Category>{});
    for (const auto& a : j.at("annotations")) {
      ImageAnnotation ia;
      ia.image_id = a.at("image_id").get<int>();
      ia.annotation.instance_id = a.value("instance_id", 0);
      ia.annotation.class_id = a.at("category_id").get<int>();
      ia.annotation.box = a.at("bbox").get<BBox>();
      set.annotations.push_back(ia);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("annotation file: ") + e.what());
  }
  return set;
}

inline json detections_to_json(const DetectionSet& set) {
  json dets = json::array();
  for (const auto& d : set.detections)
    dets.push_back({{"image_id", d.image_id},
                    {"category_id", d.detection.class_id},
                    {"bbox", d.detection.box},
                    {"score", d.detection.confidence}});
  return json{{"images", set.images}, {"categories", set.categories}, {"detections", dets}};
}

inline DetectionSet detections_from_json(const json& j) {
  DetectionSet set;
  try {
    set.images = j.value("images", std::vector<ImageInfo>{});
    set.categories = j.value("categories", std::vector<Category>{});
    for (const auto& d : j.at("detections")) {
      ImageDetection id;
      id.image_id = d.at("image_id").get<int>();
      id.detection.class_id = d.at("category_id").get<int>();
      id.detection.box = d.at("bbox").get<BBox>();
      id.detection.confidence = d.at("score").get<double>();
      set.detections.push_back(id);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("detection file: ") + e.what());
  }
  return set;
}

// ---------------------------------------------------------------------------
// File helpers

namespace detail {

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::malformed_header, path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline std::filesystem::path header_path(const std::filesystem::path& raw) {
  return raw.string() + ".json";
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  return v;
}

inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    words[i] = to_le(std::bit_cast<std::uint32_t>(values[i]));
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(float))
    throw Error(Errc::size_mismatch, path.string() + ": payload has " + std::to_string(bytes) +
                                         " bytes, header implies " +
                                         std::to_string(expected * sizeof(float)));
  in.seekg(0);
  std::vector<std::uint32_t> words(expected);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error(Errc::io_failure, "short read from " + path.string());
  std::vector<float> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    values[i] = std::bit_cast<float>(to_le(words[i]));
    if (!std::isfinite(values[i]))
      throw Error(Errc::non_finite_sample, path.string() + ": sample " + std::to_string(i));
  }
  return values;
}

struct RasterHeader {
  std::size_t height = 0, width = 0, bands = 0;
  json raw;
};

inline RasterHeader read_header(const std::filesystem::path& raw_path) {
  RasterHeader h;
  h.raw = read_json(header_path(raw_path));
  try {
    h.height = h.raw.at("height").get<std::size_t>();
    h.width = h.raw.at("width").get<std::size_t>();
    h.bands = h.raw.at("bands").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, header_path(raw_path).string() + ": " + e.what());
  }
  if (h.height == 0 || h.width == 0 || h.bands == 0)
    throw Error(Errc::malformed_header, "zero dimension in " + header_path(raw_path).string());
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public I/O

inline void write_cube(const HyperCube& cube, const std::filesystem::path& path) {
  cube.validate();
  json header{{"height", cube.height()},
              {"width", cube.width()},
              {"bands", cube.bands()},
              {"unit", to_string(cube.unit())}};
  if (!cube.wavelengths().empty()) header["wavelengths_nm"] = cube.wavelengths();
  detail::write_f32(path, cube.data());
  detail::write_json(detail::header_path(path), header);
}

inline HyperCube read_cube(const std::filesystem::path& path) {
  const auto h = detail::read_header(path);
  Unit unit = Unit::radiance;
  std::vector<double> wavelengths;
  try {
    unit = parse_unit(h.raw.value("unit", std::string("radiance")));
    if (h.raw.contains("wavelengths_nm"))
      wavelengths = h.raw.at("wavelengths_nm").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, e.what());
  }
  auto data = detail::read_f32(path, h.height * h.width * h.bands);
  HyperCube cube(h.height, h.width, h.bands, std::move(data), unit, std::move(wavelengths));
  cube.validate();
  return cube;
}

inline void write_score_map(const ScoreMap& map, const std::filesystem::path& path) {
  map.validate();
  detail::write_f32(path, map.scores);
  detail::write_json(detail::header_path(path),
                     json{{"height", map.height},
                          {"width", map.width},
                          {"bands", 1},
                          {"class_id", map.class_id},
                          {"kind", "score"}});
}

inline ScoreMap read_score_map(const std::filesystem::path& path) {
  const auto h = detail::read_header(path);
  if (h.bands != 1) throw Error(Errc::malformed_header, "score map must have bands=1");
  ScoreMap map;
  map.height = h.height;
  map.width = h.width;
  map.class_id = h.raw.value("class_id", 0);
  map.scores = detail::read_f32(path, h.height * h.width);
  return map;
}

inline void write_mask(const BinaryMask& mask, const std::filesystem::path& path) {
  if (mask.bits.size() != mask.height * mask.width) throw Error(Errc::size_mismatch, "mask length");
  std::vector<float> values(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), values.begin(),
                 [](std::uint8_t b) { return b ? 1.0f : 0.0f; });
  detail::write_f32(path, values);
  detail::write_json(detail::header_path(path),
                     json{{"height", mask.height},
                          {"width", mask.width},
                          {"bands", 1},
                          {"class_id", mask.class_id},
                          {"kind", "mask"}});
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
  const auto h = detail::read_header(path);
  if (h.bands != 1) throw Error(Errc::malformed_header, "mask must have bands=1");
  const auto values = detail::read_f32(path, h.height * h.width);
  BinaryMask mask = BinaryMask::empty(h.height, h.width, h.raw.value("class_id", 0));
  for (std::size_t i = 0; i < values.size(); ++i) mask.bits[i] = values[i] != 0.0f ? 1 : 0;
  return mask;
}

inline void write_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  detail::write_json(path, annotations_to_json(set));
}

inline AnnotationSet read_annotations(const std::filesystem::path& path) {
  return annotations_from_json(detail::read_json(path));
}

inline void write_detections(const DetectionSet& set, const std::filesystem::path& path) {
  detail::write_json(path, detections_to_json(set));
}

inline DetectionSet read_detections(const std::filesystem::path& path) {
  return detections_from_json(detail::read_json(path));
}

// ---------------------------------------------------------------------------

/// Averages every `group` adjacent bands (and their wavelengths).
inline HyperCube band_reduce(const HyperCube& cube, std::size_t group) {
  if (group == 0 || cube.bands() % group != 0)
    throw Error(Errc::indivisible_band_count, std::to_string(cube.bands()) +
                                                  " bands not divisible by " +
                                                  std::to_string(group));
  const std::size_t out_bands = cube.bands() / group;
  const std::size_t n = cube.pixels();
  std::vector<float> data(n * out_bands);
  std::vector<double> acc(n);
  for (std::size_t ob = 0; ob < out_bands; ++ob) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t g = 0; g < group; ++g) {
      const auto src = cube.band(ob * group + g);
      for (std::size_t i = 0; i < n; ++i) acc[i] += src[i];
    }
    for (std::size_t i = 0; i < n; ++i)
      data[ob * n + i] = static_cast<float>(acc[i] / static_cast<double>(group));
  }
  std::vector<double> wl;
  if (!cube.wavelengths().empty()) {
    wl.resize(out_bands);
    for (std::size_t ob = 0; ob < out_bands; ++ob) {
      double s = 0.0;
      for (std::size_t g = 0; g < group; ++g) s += cube.wavelengths()[ob * group + g];
      wl[ob] = s / static_cast<double>(group);
    }
  }
  return HyperCube(cube.height(), cube.width(), out_bands, std::move(data), cube.unit(),
                   std::move(wl));
}

}  // namespace hyperspod
