#pragma once

// Spectral fluctuation model.
//
// Per band i the coefficient of variation gamma_i = sigma_i / mu_i of a
// homogeneous reference region standardizes the per-pixel deviation
//   abar_i^j = ((s_i^j - mu_i) / mu_i) / gamma_i,
// which splits into a per-pixel baseline a^j (the mean of abar over bands)
// plus per-band noise upsilon_i^j. A simulated spectrum of one category is
//   s = (b*gamma + 1) o ((a + upsilon) o gamma + 1) o sbar
// with a ~ N(0, sigma_a), upsilon_i ~ N(0, sigma_v_i) and a wide-area factor
// b shared by all pixels of one object.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "defaults.hpp"
#include "hsicube.hpp"
#include "rng.hpp"

namespace hyperspod {

/// Which ratio is used as the coefficient of variation. `sigma_over_mu` is the
/// conventional definition and the default; `mu_over_sigma` is the literal
/// inverse reading, kept for comparison.
enum class CvOrientation { sigma_over_mu, mu_over_sigma };

struct SpectrumStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> gamma;
  double sigma_a = 0.0;
  std::vector<double> sigma_v;

  std::size_t bands() const { return mu.size(); }

  /// Stats for simulation when only gamma and the noise levels are known.
  static SpectrumStats from_parameters(std::vector<double> gamma, double sigma_a,
                                       std::vector<double> sigma_v) {
    SpectrumStats s;
    s.mu.assign(gamma.size(), 1.0);
    s.sigma = gamma;
    s.gamma = std::move(gamma);
    s.sigma_a = sigma_a;
    s.sigma_v = std::move(sigma_v);
    if (s.sigma_v.size() != s.gamma.size())
      throw Error(Errc::length_mismatch, "sigma_v length differs from gamma length");
    return s;
  }
};

inline void to_json(json& j, const SpectrumStats& s) {
  j = json{{"mu", s.mu}, {"sigma", s.sigma}, {"gamma", s.gamma}, {"sigma_a", s.sigma_a},
           {"sigma_v", s.sigma_v}};
}

inline void from_json(const json& j, SpectrumStats& s) {
  s.gamma = j.at("gamma").get<std::vector<double>>();
  s.mu = j.value("mu", std::vector<double>(s.gamma.size(), 1.0));
  s.sigma = j.value("sigma", s.gamma);
  s.sigma_a = j.at("sigma_a").get<double>();
  s.sigma_v = j.at("sigma_v").get<std::vector<double>>();
  if (s.mu.size() != s.gamma.size() || s.sigma.size() != s.gamma.size() ||
      s.sigma_v.size() != s.gamma.size())
    throw Error(Errc::length_mismatch, "SpectrumStats arrays differ in length");
}

inline SpectrumStats read_stats(const std::filesystem::path& path) {
  try {
    return detail::read_json(path).get<SpectrumStats>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, path.string() + ": " + e.what());
  }
}

inline void write_stats(const SpectrumStats& stats, const std::filesystem::path& path) {
  detail::write_json(path, json(stats));
}

/// Standardized local fluctuation factors abar_i of one spectrum.
inline std::vector<double> standardized_factors(const SpectrumStats& stats,
                                                std::span<const double> spectrum) {
  if (spectrum.size() != stats.bands()) throw Error(Errc::length_mismatch, "spectrum length");
  std::vector<double> out(spectrum.size());
  for (std::size_t i = 0; i < spectrum.size(); ++i)
    out[i] = ((spectrum[i] - stats.mu[i]) / stats.mu[i]) / stats.gamma[i];
  return out;
}

/// Baseline a^j: mean of the standardized factors over bands.
inline double baseline_factor(const SpectrumStats& stats, std::span<const double> spectrum) {
  const auto f = standardized_factors(stats, spectrum);
  double s = 0.0;
  for (double v : f) s += v;
  return s / static_cast<double>(f.size());
}

/// Per-band mean/std (population), coefficient of variation, and the
/// fluctuation-noise parameters of a homogeneous region.
inline SpectrumStats estimate_stats(const HyperCube& region,
                                    CvOrientation orientation = CvOrientation::sigma_over_mu) {
  const std::size_t n = region.pixels();
  const std::size_t bands = region.bands();
  if (n < 2) throw Error(Errc::invalid_argument, "region needs at least 2 pixels");

  SpectrumStats st;
  st.mu.resize(bands);
  st.sigma.resize(bands);
  st.gamma.resize(bands);
  st.sigma_v.resize(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    const auto v = region.band(b);
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd == 0.0 || mean <= 0.0)
      throw Error(Errc::degenerate_band, "band " + std::to_string(b) +
                                             (sd == 0.0 ? " has zero variance" : " has mean <= 0"));
    st.mu[b] = mean;
    st.sigma[b] = sd;
    st.gamma[b] = orientation == CvOrientation::sigma_over_mu ? sd / mean : mean / sd;
  }

  // abar_ij, baselines a_j, residual noise per band.
  std::vector<double> baseline(n, 0.0);
  std::vector<double> factors(n * bands);
  for (std::size_t b = 0; b < bands; ++b) {
    const auto v = region.band(b);
    for (std::size_t j = 0; j < n; ++j) {
      const double f = ((v[j] - st.mu[b]) / st.mu[b]) / st.gamma[b];
      factors[b * n + j] = f;
      baseline[j] += f;
    }
  }
  for (double& a : baseline) a /= static_cast<double>(bands);

  double a_mean = 0.0;
  for (double a : baseline) a_mean += a;
  a_mean /= static_cast<double>(n);
  double a_var = 0.0;
  for (double a : baseline) a_var += (a - a_mean) * (a - a_mean);
  st.sigma_a = std::sqrt(a_var / static_cast<double>(n));

  for (std::size_t b = 0; b < bands; ++b) {
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += factors[b * n + j] - baseline[j];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double r = factors[b * n + j] - baseline[j] - m;
      var += r * r;
    }
    st.sigma_v[b] = std::sqrt(var / static_cast<double>(n));
  }
  return st;
}

/// The combined fluctuation model with every random quantity given.
inline std::vector<double> apply_fluctuation(std::span<const double> gamma,
                                             std::span<const double> baseline, double b, double a,
                                             std::span<const double> upsilon) {
  if (gamma.size() != baseline.size() || upsilon.size() != baseline.size())
    throw Error(Errc::length_mismatch, "fluctuation inputs differ in length");
  std::vector<double> out(baseline.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (b * gamma[i] + 1.0) * ((a + upsilon[i]) * gamma[i] + 1.0) * baseline[i];
  return out;
}

/// Draws a and upsilon from `rng` and applies the combined model. When `b` is
/// not given it is drawn from U[-0.3, 0.3] first.
inline std::vector<double> simulate_spectrum(const SpectrumStats& stats,
                                             std::span<const double> baseline,
                                             std::optional<double> b, Rng& rng) {
  if (baseline.size() != stats.bands() || stats.sigma_v.size() != stats.bands())
    throw Error(Errc::length_mismatch, "baseline has " + std::to_string(baseline.size()) +
                                           " bands, stats have " + std::to_string(stats.bands()));
  const double wide =
      b ? *b : rng.uniform(defaults::kWideAreaFactorLo, defaults::kWideAreaFactorHi);
  if (!std::isfinite(wide)) throw Error(Errc::invalid_argument, "b must be finite");
  const double a = rng.normal(0.0, stats.sigma_a);
  std::vector<double> upsilon(baseline.size());
  for (std::size_t i = 0; i < upsilon.size(); ++i) upsilon[i] = rng.normal(0.0, stats.sigma_v[i]);
  return apply_fluctuation(stats.gamma, baseline, wide, a, upsilon);
}

struct EndmemberSpectrum {
  std::string name;
  std::vector<double> reflectance;  // optional, empty when unknown
  std::vector<double> radiance_baseline;
};

/// Linear reflectance-to-radiance conversion, rescaled so the peak equals m_t:
///   raw = (s_w / r_w) o r_t,   s_t = (m_t / max(raw)) * raw.
inline EndmemberSpectrum reflectance_to_radiance(std::span<const double> r_t,
                                                 std::span<const double> r_w,
                                                 std::span<const double> s_w, double m_t,
                                                 std::string name = {}) {
  if (r_t.size() != r_w.size() || r_t.size() != s_w.size())
    throw Error(Errc::length_mismatch, "reflectance/radiance curves differ in length");
  if (!(m_t > 0.0)) throw Error(Errc::invalid_argument, "m_t must be positive");
  std::vector<double> raw(r_t.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!(r_w[i] > 0.0))
      throw Error(Errc::zero_reflectance_divisor, "r_w[" + std::to_string(i) + "] <= 0");
    raw[i] = (s_w[i] / r_w[i]) * r_t[i];
  }
  const double peak = *std::max_element(raw.begin(), raw.end());
  if (!(peak > 0.0)) throw Error(Errc::invalid_argument, "converted curve has no positive value");
  EndmemberSpectrum e;
  e.name = std::move(name);
  e.reflectance.assign(r_t.begin(), r_t.end());
  e.radiance_baseline.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) e.radiance_baseline[i] = raw[i] * (m_t / peak);
  return e;
}

/// Smooth synthetic reflectance curve in [0.05, 0.95]: a sloped base plus a
/// few Gaussian absorption/reflection features. Stand-in for library spectra.
inline std::vector<double> synthetic_reflectance(std::size_t bands, Rng& rng) {
  std::vector<double> r(bands);
  const double base = rng.uniform(0.15, 0.6);
  const double slope = rng.uniform(-0.25, 0.25);
  struct Feature {
    double center, width, depth;
  };
  std::vector<Feature> features(3);
  for (auto& f : features)
    f = {rng.uniform(0.0, 1.0), rng.uniform(0.05, 0.25), rng.uniform(-0.3, 0.3)};
  for (std::size_t i = 0; i < bands; ++i) {
    const double t = bands > 1 ? static_cast<double>(i) / static_cast<double>(bands - 1) : 0.0;
    double v = base + slope * (t - 0.5);
    for (const auto& f : features)
      v += f.depth * std::exp(-0.5 * (t - f.center) * (t - f.center) / (f.width * f.width));
    r[i] = std::clamp(v, 0.05, 0.95);
  }
  return r;
}

// Endmember CSV: header "wavelength_nm,value", one row per band.

inline void write_endmember_csv(std::span<const double> wavelengths, std::span<const double> values,
                                const std::filesystem::path& path) {
  if (wavelengths.size() != values.size()) throw Error(Errc::length_mismatch, "csv columns");
  std::ostringstream os;
  os.precision(17);
  os << "wavelength_nm,value\n";
  for (std::size_t i = 0; i < values.size(); ++i) os << wavelengths[i] << ',' << values[i] << '\n';
  detail::write_text(path, os.str());
}

struct SpectrumCsv {
  std::vector<double> wavelengths;
  std::vector<double> values;
};

inline SpectrumCsv read_endmember_csv(const std::filesystem::path& path) {
  std::istringstream in(detail::read_text(path));
  SpectrumCsv out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw Error(Errc::malformed_header, path.string() + ": expected two columns");
    try {
      const double wl = std::stod(line.substr(0, comma));
      const double v = std::stod(line.substr(comma + 1));
      out.wavelengths.push_back(wl);
      out.values.push_back(v);
    } catch (const std::exception&) {
      if (!first) throw Error(Errc::malformed_header, path.string() + ": bad row '" + line + "'");
    }
    first = false;
  }
  return out;
}

/// Prior target spectra keyed by class. CSV rows are `class_id,v0,v1,...`
/// after a header line; a class may own several rows.
struct PriorSpectra {
  std::vector<int> class_ids;
  std::vector<std::vector<double>> spectra;

  std::size_t size() const { return spectra.size(); }
  std::size_t bands() const { return spectra.empty() ? 0 : spectra.front().size(); }

  void add(int class_id, std::vector<double> spectrum) {
    if (!spectra.empty() && spectrum.size() != bands())
      throw Error(Errc::length_mismatch, "prior spectrum length differs from the others");
    class_ids.push_back(class_id);
    spectra.push_back(std::move(spectrum));
  }

  /// Distinct class ids in first-appearance order.
  std::vector<int> classes() const {
    std::vector<int> out;
    for (int c : class_ids)
      if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    return out;
  }

  std::vector<std::vector<double>> of_class(int class_id) const {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < spectra.size(); ++i)
      if (class_ids[i] == class_id) out.push_back(spectra[i]);
    return out;
  }
};

inline void write_priors_csv(const PriorSpectra& priors, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(17);
  os << "class_id";
  for (std::size_t b = 0; b < priors.bands(); ++b) os << ",b" << b;
  os << '\n';
  for (std::size_t i = 0; i < priors.size(); ++i) {
    os << priors.class_ids[i];
    for (double v : priors.spectra[i]) os << ',' << v;
    os << '\n';
  }
  detail::write_text(path, os.str());
}

inline PriorSpectra read_priors_csv(const std::filesystem::path& path) {
  std::istringstream in(detail::read_text(path));
  PriorSpectra out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || row++ == 0) continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<double> values;
    int class_id = 0;
    bool first = true;
    try {
      while (std::getline(fields, cell, ',')) {
        if (first) {
          class_id = std::stoi(cell);
          first = false;
        } else {
          values.push_back(std::stod(cell));
        }
      }
    } catch (const std::exception&) {
      throw Error(Errc::malformed_header, path.string() + ": bad row '" + line + "'");
    }
    if (values.empty()) throw Error(Errc::malformed_header, path.string() + ": row without values");
    out.add(class_id, std::move(values));
  }
  if (out.size() == 0) throw Error(Errc::malformed_header, path.string() + ": no prior spectra");
  return out;
}

}  // namespace hyperspod
