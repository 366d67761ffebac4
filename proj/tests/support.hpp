#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "hyperspod/hyperspod.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("hyperspod_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline hyperspod::HyperCube random_cube(std::size_t h, std::size_t w, std::size_t bands, std::uint64_t seed,
                                        double lo = 100.0, double hi = 1000.0) {
  hyperspod::Rng rng(seed);
  auto cube = hyperspod::HyperCube::filled(h, w, bands, 0.0f);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t b = 0; b < bands; ++b) cube.at(r, c, b) = static_cast<float>(rng.uniform(lo, hi));
  return cube;
}

inline std::filesystem::path source_dir() { return HYPERSPOD_SOURCE_DIR; }

}  // namespace testing_support
