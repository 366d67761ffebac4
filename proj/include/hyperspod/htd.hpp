#pragma once

// Classic hyperspectral target detectors with dual-window local background.
//
// For the pixel under test the background set is every pixel of the w_out
// box minus the w_in box, both centered on the pixel and clipped at the image
// border. Correlation-based filters (CEM, TCIMF) use R = (1/n) sum b b^T;
// covariance-based ones (SMF, ASD) use the demeaned form.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "defaults.hpp"
#include "hsicube.hpp"
#include "parallel.hpp"
#include "specmodel.hpp"

namespace hyperspod {

struct DualWindow {
  int w_in = 1;
  int w_out = 3;

  void validate() const {
    if (w_in < 1 || w_out <= w_in || w_in % 2 == 0 || w_out % 2 == 0)
      throw Error(Errc::invalid_argument, "dual window needs odd sizes with w_out > w_in >= 1, got (" +
                                              std::to_string(w_in) + ", " + std::to_string(w_out) + ")");
  }
};

/// Per-class windows with a fallback for unlisted classes.
struct WindowTable {
  DualWindow fallback{defaults::kAvonWindow[0], defaults::kAvonWindow[1]};
  std::map<int, DualWindow> per_class;

  DualWindow for_class(int class_id) const {
    const auto it = per_class.find(class_id);
    return it == per_class.end() ? fallback : it->second;
  }

  /// Windows tuned for the eight SPOD-style classes (ids 1..8).
  static WindowTable spod() {
    WindowTable t;
    for (std::size_t i = 0; i < defaults::kSpodWindows.size(); ++i)
      t.per_class[static_cast<int>(i) + 1] = {defaults::kSpodWindows[i][0], defaults::kSpodWindows[i][1]};
    return t;
  }
};

enum class HtdMethod { cem, smf, osp, asd, tcimf };

inline std::string to_string(HtdMethod m) {
  switch (m) {
    case HtdMethod::cem: return "cem";
    case HtdMethod::smf: return "smf";
    case HtdMethod::osp: return "osp";
    case HtdMethod::asd: return "asd";
    case HtdMethod::tcimf: return "tcimf";
  }
  return "cem";
}

inline HtdMethod parse_htd_method(const std::string& s) {
  if (s == "cem") return HtdMethod::cem;
  if (s == "smf") return HtdMethod::smf;
  if (s == "osp") return HtdMethod::osp;
  if (s == "asd") return HtdMethod::asd;
  if (s == "tcimf") return HtdMethod::tcimf;
  throw Error(Errc::invalid_argument, "unknown detector '" + s + "'");
}

struct HtdOptions {
  double ridge_scale = defaults::kRidgeScale;
  int ridge_retries = defaults::kRidgeRetries;
  double min_rcond = 1e-12;
  unsigned workers = 1;
};

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Cholesky factor of M + lambda*I. lambda starts at 0 when the matrix was
/// estimated from at least `bands` samples, otherwise at
/// ridge_scale * trace(M) / bands, and grows by x10 per retry.
struct RegularizedFactor {
  Eigen::LLT<Mat> llt;
  double lambda = 0.0;
  int attempts = 0;

  Vec solve(const Vec& v) const { return llt.solve(v); }
  Mat solve(const Mat& m) const { return llt.solve(m); }
};

inline RegularizedFactor regularized_factor(const Mat& m, std::size_t samples,
                                            const HtdOptions& opt = {}) {
  const auto n = m.rows();
  const double base = opt.ridge_scale * m.trace() / static_cast<double>(n);
  RegularizedFactor f;
  f.lambda = samples >= static_cast<std::size_t>(n) ? 0.0 : base;
  for (int attempt = 0; attempt <= opt.ridge_retries; ++attempt) {
    f.attempts = attempt + 1;
    Mat reg = m;
    reg.diagonal().array() += f.lambda;
    f.llt.compute(reg);
    if (f.llt.info() == Eigen::Success && f.llt.rcond() > opt.min_rcond) return f;
    f.lambda = f.lambda == 0.0 ? base : f.lambda * 10.0;
    if (!(f.lambda > 0.0)) break;
  }
  throw Error(Errc::singular_correlation,
              "matrix stays singular after " + std::to_string(f.attempts) + " ridge attempts");
}

/// CEM filter w = R^-1 d / (d^T R^-1 d).
inline Vec cem_filter(const RegularizedFactor& r, const Vec& d) {
  const Vec rd = r.solve(d);
  return rd / d.dot(rd);
}

/// Projector onto the orthogonal complement of span(U): I - U U^+.
inline Mat osp_projector(const Mat& u) {
  const auto n = u.rows();
  if (u.cols() == 0) return Mat::Identity(n, n);
  const Mat pinv = u.completeOrthogonalDecomposition().pseudoInverse();
  return Mat::Identity(n, n) - u * pinv;
}

/// TCIMF filter: minimizes output energy subject to [D U]^T w = [1; 0].
inline Vec tcimf_filter(const RegularizedFactor& r, const Mat& targets, const Mat& undesired) {
  Mat m(targets.rows(), targets.cols() + undesired.cols());
  m << targets, undesired;
  Vec c = Vec::Zero(m.cols());
  c.head(targets.cols()).setOnes();
  const Mat rm = r.solve(m);
  const Mat gram = m.transpose() * rm;
  const Mat gram_pinv = gram.completeOrthogonalDecomposition().pseudoInverse();
  return rm * (gram_pinv * c);
}

namespace detail {

inline Vec to_vec(std::span<const double> s) { return Eigen::Map<const Vec>(s.data(), static_cast<Eigen::Index>(s.size())); }

inline Mat to_mat(const std::vector<std::vector<double>>& columns, std::size_t bands) {
  Mat m(static_cast<Eigen::Index>(bands), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j].size() != bands) throw Error(Errc::length_mismatch, "signature band count");
    m.col(static_cast<Eigen::Index>(j)) = to_vec(columns[j]);
  }
  return m;
}

/// Cube as a bands x pixels matrix.
inline Mat pixel_matrix(const HyperCube& cube) {
  Mat x(static_cast<Eigen::Index>(cube.bands()), static_cast<Eigen::Index>(cube.pixels()));
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    const auto band = cube.band(b);
    for (std::size_t p = 0; p < cube.pixels(); ++p) x(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(p)) = band[p];
  }
  return x;
}

/// Column indices of the clipped dual-window annulus around (row, col).
inline std::vector<Eigen::Index> annulus(std::size_t h, std::size_t w, std::size_t row,
                                         std::size_t col, const DualWindow& win) {
  const long ro = win.w_out / 2, ri = win.w_in / 2;
  std::vector<Eigen::Index> idx;
  const long r = static_cast<long>(row), c = static_cast<long>(col);
  for (long y = std::max(0L, r - ro); y <= std::min(static_cast<long>(h) - 1, r + ro); ++y)
    for (long x = std::max(0L, c - ro); x <= std::min(static_cast<long>(w) - 1, c + ro); ++x) {
      if (std::abs(y - r) <= ri && std::abs(x - c) <= ri) continue;
      idx.push_back(static_cast<Eigen::Index>(y * static_cast<long>(w) + x));
    }
  return idx;
}

struct LocalStats {
  Mat second_moment;  // correlation or covariance
  Vec mean;
  std::size_t samples = 0;
};

inline LocalStats local_stats(const Mat& pixels, const std::vector<Eigen::Index>& idx, bool center) {
  const auto bands = pixels.rows();
  Mat b(bands, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) b.col(static_cast<Eigen::Index>(k)) = pixels.col(idx[k]);
  LocalStats s;
  s.samples = idx.size();
  s.mean = b.rowwise().mean();
  if (center) b.colwise() -= s.mean;
  s.second_moment = (b * b.transpose()) / static_cast<double>(idx.size());
  return s;
}

/// Runs `score(pixel_column, stats)` for every pixel over its annulus.
template <typename ScoreFn>
ScoreMap windowed(const HyperCube& cube, const DualWindow& win, bool center, const HtdOptions& opt,
                  int class_id, ScoreFn&& score) {
  win.validate();
  const Mat pixels = pixel_matrix(cube);
  ScoreMap map{cube.height(), cube.width(), class_id, std::vector<float>(cube.pixels(), 0.0f)};
  parallel_for(cube.height(), opt.workers, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < cube.width(); ++c) {
        const auto idx = annulus(cube.height(), cube.width(), r, c, win);
        if (idx.empty()) throw Error(Errc::invalid_argument, "dual window has no background pixels");
        const auto stats = local_stats(pixels, idx, center);
        const auto p = static_cast<Eigen::Index>(r * cube.width() + c);
        map.scores[static_cast<std::size_t>(p)] = static_cast<float>(score(pixels.col(p), stats));
      }
  });
  return map;
}

inline void check_bands(const HyperCube& cube, std::size_t n) {
  if (n != cube.bands())
    throw Error(Errc::length_mismatch, "signature has " + std::to_string(n) + " bands, cube has " +
                                           std::to_string(cube.bands()));
}

}  // namespace detail

/// Constrained energy minimization: score = w^T x with w^T d = 1.
inline ScoreMap cem(const HyperCube& cube, std::span<const double> d, const DualWindow& win,
                    const HtdOptions& opt = {}, int class_id = 0) {
  detail::check_bands(cube, d.size());
  const Vec dv = detail::to_vec(d);
  return detail::windowed(cube, win, false, opt, class_id, [&](const auto& x, const auto& s) {
    return cem_filter(regularized_factor(s.second_moment, s.samples, opt), dv).dot(x);
  });
}

/// Spectral matched filter on demeaned data, scaled so the target scores 1:
/// (d - m)^T C^-1 (x - m) / ((d - m)^T C^-1 (d - m)).
inline ScoreMap smf(const HyperCube& cube, std::span<const double> d, const DualWindow& win,
                    const HtdOptions& opt = {}, int class_id = 0) {
  detail::check_bands(cube, d.size());
  const Vec dv = detail::to_vec(d);
  return detail::windowed(cube, win, true, opt, class_id, [&](const auto& x, const auto& s) {
    const auto f = regularized_factor(s.second_moment, s.samples, opt);
    const Vec dm = dv - s.mean;
    const Vec cd = f.solve(dm);
    return cd.dot(x - s.mean) / dm.dot(cd);
  });
}

/// Orthogonal subspace projection d^T P x, with P projecting out the
/// undesired signatures. The statistic needs no local background.
inline ScoreMap osp(const HyperCube& cube, std::span<const double> d,
                    const std::vector<std::vector<double>>& undesired, const HtdOptions& opt = {},
                    int class_id = 0) {
  detail::check_bands(cube, d.size());
  const Vec filter = osp_projector(detail::to_mat(undesired, cube.bands())).transpose() * detail::to_vec(d);
  const Mat pixels = detail::pixel_matrix(cube);
  ScoreMap map{cube.height(), cube.width(), class_id, std::vector<float>(cube.pixels(), 0.0f)};
  parallel_for(cube.pixels(), opt.workers, [&](std::size_t p0, std::size_t p1) {
    for (std::size_t p = p0; p < p1; ++p)
      map.scores[p] = static_cast<float>(filter.dot(pixels.col(static_cast<Eigen::Index>(p))));
  });
  return map;
}

/// Adaptive subspace detector for a one-dimensional target subspace (the
/// adaptive coherence estimator) on demeaned data:
/// (d^T C^-1 x)^2 / ((d^T C^-1 d)(x^T C^-1 x)).
inline ScoreMap asd(const HyperCube& cube, std::span<const double> d, const DualWindow& win,
                    const HtdOptions& opt = {}, int class_id = 0) {
  detail::check_bands(cube, d.size());
  const Vec dv = detail::to_vec(d);
  return detail::windowed(cube, win, true, opt, class_id, [&](const auto& x, const auto& s) {
    const auto f = regularized_factor(s.second_moment, s.samples, opt);
    const Vec dm = dv - s.mean;
    const Vec xm = x - s.mean;
    const Vec cd = f.solve(dm);
    const double num = cd.dot(xm);
    const double den = dm.dot(cd) * xm.dot(f.solve(xm));
    return den > 0.0 ? num * num / den : 0.0;
  });
}

/// Target-constrained interference-minimized filter with target matrix D and
/// undesired matrix U.
inline ScoreMap tcimf(const HyperCube& cube, const std::vector<std::vector<double>>& targets,
                      const std::vector<std::vector<double>>& undesired, const DualWindow& win,
                      const HtdOptions& opt = {}, int class_id = 0) {
  if (targets.empty()) throw Error(Errc::invalid_argument, "tcimf needs at least one target");
  const Mat dm = detail::to_mat(targets, cube.bands());
  const Mat um = detail::to_mat(undesired, cube.bands());
  return detail::windowed(cube, win, false, opt, class_id, [&](const auto& x, const auto& s) {
    return tcimf_filter(regularized_factor(s.second_moment, s.samples, opt), dm, um).dot(x);
  });
}

/// One map per class in first-appearance order. Classes with several prior
/// spectra take the pixelwise maximum over the per-spectrum maps; TCIMF uses
/// all of them at once as its target matrix.
inline std::vector<ScoreMap> detect_all(const HyperCube& cube, const PriorSpectra& priors,
                                        HtdMethod method, const WindowTable& windows,
                                        const HtdOptions& opt = {}) {
  if (priors.size() == 0) throw Error(Errc::invalid_argument, "no prior spectra");
  detail::check_bands(cube, priors.bands());
  std::vector<ScoreMap> out;
  for (int cls : priors.classes()) {
    const auto own = priors.of_class(cls);
    std::vector<std::vector<double>> others;
    for (std::size_t i = 0; i < priors.size(); ++i)
      if (priors.class_ids[i] != cls) others.push_back(priors.spectra[i]);
    const DualWindow win = windows.for_class(cls);
    if (method == HtdMethod::tcimf) {
      out.push_back(tcimf(cube, own, others, win, opt, cls));
      continue;
    }
    ScoreMap best;
    for (std::size_t k = 0; k < own.size(); ++k) {
      ScoreMap m;
      switch (method) {
        case HtdMethod::cem: m = cem(cube, own[k], win, opt, cls); break;
        case HtdMethod::smf: m = smf(cube, own[k], win, opt, cls); break;
        case HtdMethod::osp: m = osp(cube, own[k], others, opt, cls); break;
        case HtdMethod::asd: m = asd(cube, own[k], win, opt, cls); break;
        case HtdMethod::tcimf: break;
      }
      if (k == 0) {
        best = std::move(m);
      } else {
        for (std::size_t p = 0; p < best.scores.size(); ++p)
          best.scores[p] = std::max(best.scores[p], m.scores[p]);
      }
    }
    out.push_back(std::move(best));
  }
  return out;
}

}  // namespace hyperspod
