#pragma once

// Self-contained invariant checks of the attention and decoding kernels,
// runnable from the command line.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "kernels.hpp"
#include "rng.hpp"

namespace hyperspod {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace kcheck {

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Bilinear coefficients on in-bounds positions: non-negative and summing to 1.
inline CheckResult bilinear_lmm(std::size_t samples = 100000, std::uint64_t seed = 11) {
  Rng rng(seed);
  double worst_sum = 0.0, min_eps = 1.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const auto c = bilinear_coefficients(rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0));
    const double s = c.eps[0] + c.eps[1] + c.eps[2] + c.eps[3];
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    min_eps = std::min({min_eps, c.eps[0], c.eps[1], c.eps[2], c.eps[3]});
  }
  return {"bilinear_lmm", min_eps >= 0.0 && worst_sum <= 1e-9,
          "min coefficient " + num(min_eps) + ", max |sum-1| " + num(worst_sum)};
}

/// Self-excited value: zero outside the 4x4 active region, the token itself
/// on [-1,1]^2, half the token at (1.5, 0), and equal to the separable tent
/// product everywhere.
inline CheckResult self_excited_geometry(std::size_t samples = 1000, std::uint64_t seed = 12) {
  Rng rng(seed);
  const std::vector<double> g{1.5, -2.0, 0.25, 4.0};
  bool ok = true;
  double worst = 0.0;
  auto tent = [](double t) { return std::clamp(2.0 - std::abs(t), 0.0, 1.0); };
  for (std::size_t i = 0; i < samples && ok; ++i) {
    const double x = rng.uniform(-4.0, 4.0), y = rng.uniform(-4.0, 4.0);
    const auto v = self_excited_value(g, x, y);
    const double m = std::max(std::abs(x), std::abs(y));
    const double expect = tent(x) * tent(y);
    for (std::size_t c = 0; c < g.size(); ++c) {
      worst = std::max(worst, std::abs(v[c] - expect * g[c]));
      if (m >= 2.0 && v[c] != 0.0) ok = false;
      if (m <= 1.0 && std::abs(v[c] - g[c]) > 1e-12) ok = false;
    }
  }
  const auto half = self_excited_value(g, 1.5, 0.0);
  for (std::size_t c = 0; c < g.size(); ++c) worst = std::max(worst, std::abs(half[c] - 0.5 * g[c]));
  ok = ok && worst <= 1e-9;
  return {"self_excited_geometry", ok, "max deviation " + num(worst)};
}

inline ModelConfig tiny_config(std::size_t bands = 4) {
  ModelConfig c;
  c.bands = bands;
  c.dim = 32;
  c.heads = 8;
  c.points = 4;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.num_classes = 3;
  return c;
}

inline HyperCube random_cube(std::size_t h, std::size_t w, std::size_t bands, std::uint64_t seed) {
  Rng rng(seed);
  HyperCube cube = HyperCube::filled(h, w, bands, 0.0f);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t b = 0; b < bands; ++b) cube.at(r, c, b) = static_cast<float>(rng.uniform(500.0, 3000.0));
  return cube;
}

/// Per-head attention weights sum to one.
inline CheckResult attention_normalization(std::size_t trials = 200, std::uint64_t seed = 13) {
  const auto w = random_weights(tiny_config(), seed);
  const auto& p = w.encoder.front().attn;
  Rng rng(seed + 1);
  std::vector<double> values(8 * 8 * p.dim), gv(p.dim), q(p.dim), out(p.dim);
  for (double& v : values) v = rng.normal();
  for (double& v : gv) v = rng.normal();
  const FeatureGrid grid{values.data(), 8, 8, p.dim};
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    for (double& v : q) v = 3.0 * rng.normal();
    AttentionTrace tr;
    s2a_sample(p, q.data(), {rng.uniform(0, 7), rng.uniform(0, 7), 1, 1, rng.uniform(-1, 1), rng.uniform(-1, 1)},
               grid, gv.data(), Padding::zero, out.data(), &tr);
    for (double s : tr.head_sums) worst = std::max(worst, std::abs(s - 1.0));
  }
  return {"attention_normalization", worst <= 1e-12, "max |sum-1| " + num(worst)};
}

inline CheckResult sigmoid_roundtrip(std::size_t samples = 100000, std::uint64_t seed = 14) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double b = rng.uniform(1e-6, 1.0 - 1e-6);
    worst = std::max(worst, std::abs(sigmoid(inverse_sigmoid(b)) - b));
  }
  return {"sigmoid_roundtrip", worst <= 1e-9, "max error " + num(worst)};
}

/// Permuting the decoder queries permutes every output the same way.
inline CheckResult decoder_permutation(std::uint64_t seed = 15) {
  const auto w = random_weights(tiny_config(), seed);
  const auto cube = random_cube(8, 8, 4, seed + 1);
  auto tokens = tokenize(cube, defaults::kRadianceScaleSpod, w.embed, w.embed_ln);
  const auto pos = position_table(8, 8, w.config.dim);
  tokens = encoder_layer(tokens, w.encoder.front(), pos);
  const auto st = init_anchors(tokens, w.breg0, w.cls0, 1.0, 20);

  std::vector<std::size_t> perm(st.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed + 2);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  AnchorState ps = st;
  const std::size_t C = st.dim, NC = st.num_classes;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    ps.boxes[i] = st.boxes[perm[i]];
    ps.boxes_hat[i] = st.boxes_hat[perm[i]];
    ps.boxes_pred[i] = st.boxes_pred[perm[i]];
    std::copy_n(st.queries.begin() + static_cast<std::ptrdiff_t>(perm[i] * C), C,
                ps.queries.begin() + static_cast<std::ptrdiff_t>(i * C));
    std::copy_n(st.scores.begin() + static_cast<std::ptrdiff_t>(perm[i] * NC), NC,
                ps.scores.begin() + static_cast<std::ptrdiff_t>(i * NC));
  }
  const auto a = decode_layer(st, tokens, w.decoder.front());
  const auto b = decode_layer(ps, tokens, w.decoder.front());
  bool ok = true;
  for (std::size_t i = 0; i < perm.size() && ok; ++i) {
    ok = a.boxes_pred[perm[i]] == b.boxes_pred[i] && a.boxes[perm[i]] == b.boxes[i];
    for (std::size_t c = 0; c < C && ok; ++c) ok = a.queries[perm[i] * C + c] == b.queries[i * C + c];
    for (std::size_t c = 0; c < NC && ok; ++c) ok = a.scores[perm[i] * NC + c] == b.scores[i * NC + c];
  }
  return {"decoder_permutation_equivariance", ok, ok ? "exact" : "outputs differ"};
}

/// Periodic shifts of tokens and position table commute with the pixel
/// branch of self-attention. The global branch is switched off through its
/// logits because its reference depends on absolute position.
inline CheckResult encoder_translation(std::uint64_t seed = 16) {
  auto w = random_weights(tiny_config(), seed);
  auto& p = w.encoder.front().attn;
  const std::size_t K = p.points;
  for (std::size_t m = 0; m < p.heads; ++m)
    for (std::size_t k = 0; k < K; ++k) p.weights.b[m * 2 * K + K + k] = -1e9;

  const std::size_t H = 6, W = 7, C = p.dim, dy = 2, dx = 3;
  Rng rng(seed + 1);
  TokenGrid t{H, W, C, std::vector<double>(H * W * C), std::vector<double>(C)};
  for (double& v : t.pixels) v = rng.normal();
  for (double& v : t.global) v = rng.normal();
  std::vector<double> pos(H * W * C);
  for (double& v : pos) v = 0.5 * rng.normal();

  auto roll = [&](const std::vector<double>& src) {
    std::vector<double> dst(src.size());
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((r * W + c) * C), C,
                    dst.begin() + static_cast<std::ptrdiff_t>((((r + dy) % H) * W + (c + dx) % W) * C));
    return dst;
  };
  TokenGrid shifted = t;
  shifted.pixels = roll(t.pixels);
  const EncoderOptions opt{Padding::periodic, 1};
  const auto a = encoder_layer(t, w.encoder.front(), pos, opt);
  const auto b = encoder_layer(shifted, w.encoder.front(), roll(pos), opt);
  const auto ra = roll(a.pixels);
  double worst = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) worst = std::max(worst, std::abs(ra[i] - b.pixels[i]));
  return {"encoder_translation_equivariance", worst <= 1e-10, "max deviation " + num(worst)};
}

/// Full random-weight rollout keeps every box strictly inside (0,1)^4.
inline CheckResult rollout_range(std::uint64_t seed = 17) {
  const auto w = random_weights(tiny_config(), seed);
  const auto cube = random_cube(8, 8, 4, seed + 1);
  ForwardConfig cfg;
  ForwardTrace trace;
  run_forward(cube, w, cfg, &trace);
  bool ok = !trace.boxes.empty();
  for (const auto& b : trace.boxes)
    for (double v : {b.cx, b.cy, b.w, b.h}) ok = ok && v > 0.0 && v < 1.0;
  return {"rollout_box_range", ok, std::to_string(trace.boxes.size()) + " boxes"};
}

}  // namespace kcheck

inline std::vector<CheckResult> run_kernel_checks() {
  using Fn = CheckResult (*)();
  const std::vector<Fn> checks{
      [] { return kcheck::bilinear_lmm(); },          [] { return kcheck::self_excited_geometry(); },
      [] { return kcheck::attention_normalization(); }, [] { return kcheck::sigmoid_roundtrip(); },
      [] { return kcheck::decoder_permutation(); },     [] { return kcheck::encoder_translation(); },
      [] { return kcheck::rollout_range(); }};
  std::vector<CheckResult> out;
  for (Fn f : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = f();
    } catch (const std::exception& e) {
      r = {"exception", false, e.what()};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace hyperspod
