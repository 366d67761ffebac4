#pragma once

// Forward-only kernels of the point-object detection transformer:
// tokenization, self/cross subpixel-scale attention with the self-excited
// global branch, encoder and decoder layers, anchor initialization and the
// full inference pass. Computation is in double precision; weights are stored
// as float32.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "assign.hpp"
#include "box.hpp"
#include "defaults.hpp"
#include "hsicube.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace hyperspod {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kInverseSigmoidEps = 1e-12;

/// logit with the argument clamped to [eps, 1 - eps].
inline double inverse_sigmoid(double p) {
  p = std::clamp(p, kInverseSigmoidEps, 1.0 - kInverseSigmoidEps);
  return std::log(p / (1.0 - p));
}

// ---------------------------------------------------------------------------
// Layers

struct Linear {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w;  // out x in, row-major
  std::vector<double> b;

  Linear() = default;
  Linear(std::size_t in_, std::size_t out_) : in(in_), out(out_), w(in_ * out_, 0.0), b(out_, 0.0) {}

  void apply(const double* x, double* y) const {
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = w.data() + o * in;
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
      y[o] = s;
    }
  }

  std::vector<double> operator()(std::span<const double> x) const {
    if (x.size() != in) throw Error(Errc::shape_mismatch, "linear input width");
    std::vector<double> y(out);
    apply(x.data(), y.data());
    return y;
  }
};

/// LayerNorm with population variance. Tokens whose variance is below eps
/// normalize to zero, so the output is beta.
struct LayerNorm {
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = defaults::kLayerNormEps;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t n) : gamma(n, 1.0), beta(n, 0.0) {}

  void apply(double* x) const {
    const std::size_t n = gamma.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const double inv = var < eps ? 0.0 : 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) x[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  }
};

struct ModelConfig {
  std::size_t bands = 0;
  std::size_t dim = 32;
  std::size_t heads = defaults::kHeads;
  std::size_t points = defaults::kPoints;
  std::size_t ffn_dim = 0;  // 0 means kFfnMultiplier * dim
  std::size_t encoder_layers = defaults::kEncoderLayers;
  std::size_t decoder_layers = defaults::kDecoderLayers;
  std::size_t num_classes = 1;

  std::size_t ffn() const { return ffn_dim ? ffn_dim : defaults::kFfnMultiplier * dim; }

  void validate() const {
    if (bands == 0 || dim == 0 || heads == 0 || points == 0 || num_classes == 0)
      throw Error(Errc::shape_mismatch, "model sizes must be positive");
    if (dim % heads != 0) throw Error(Errc::shape_mismatch, "heads must divide dim");
    if (dim % 4 != 0) throw Error(Errc::shape_mismatch, "dim must be a multiple of 4");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"bands", c.bands},        {"dim", c.dim},
           {"heads", c.heads},        {"points", c.points},
           {"ffn_dim", c.ffn()},      {"encoder_layers", c.encoder_layers},
           {"decoder_layers", c.decoder_layers}, {"num_classes", c.num_classes}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c.bands = j.at("bands").get<std::size_t>();
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.points = j.value("points", c.points);
  c.ffn_dim = j.value("ffn_dim", std::size_t{0});
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.num_classes = j.value("num_classes", c.num_classes);
}

/// Offsets/weights projections of one attention module. Index layouts:
///   offsets: branch * 2MK + (m * K + k) * 2 + axis   (branch 0 pixel, 1 global)
///   weights: m * 2K + branch * K + k
struct S2AParams {
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t points = 0;
  Linear offsets;
  Linear weights;
  Linear value;
  Linear output;
  std::vector<double> init;  // M x K x 2 initial offsets

  S2AParams() = default;
  S2AParams(std::size_t dim_, std::size_t heads_, std::size_t points_)
      : dim(dim_), heads(heads_), points(points_), offsets(dim_, 4 * heads_ * points_),
        weights(dim_, 2 * heads_ * points_), value(dim_, dim_), output(dim_, dim_),
        init(initial_offsets(heads_, points_)) {}

  /// Head m points along angle 2 pi m / M, scaled so the larger coordinate
  /// is k + 1: the K points of the 8 heads sit on the vertices and edge
  /// midpoints of nested squares.
  static std::vector<double> initial_offsets(std::size_t heads, std::size_t points) {
    std::vector<double> init(heads * points * 2);
    for (std::size_t m = 0; m < heads; ++m) {
      const double theta = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(heads);
      double gx = std::cos(theta), gy = std::sin(theta);
      const double norm = std::max(std::abs(gx), std::abs(gy));
      gx /= norm;
      gy /= norm;
      // Snap cos/sin rounding noise so axis-aligned heads are exact.
      if (std::abs(gx) < 1e-12) gx = 0.0;
      if (std::abs(gy) < 1e-12) gy = 0.0;
      for (std::size_t k = 0; k < points; ++k) {
        init[(m * points + k) * 2] = gx * static_cast<double>(k + 1);
        init[(m * points + k) * 2 + 1] = gy * static_cast<double>(k + 1);
      }
    }
    return init;
  }
};

struct BoxHead {
  Linear l1, l2, l3;

  BoxHead() = default;
  explicit BoxHead(std::size_t dim) : l1(dim, dim), l2(dim, dim), l3(dim, 4) {}

  std::array<double, 4> apply(const double* x) const {
    std::vector<double> h1(l1.out), h2(l2.out);
    l1.apply(x, h1.data());
    for (double& v : h1) v = std::max(0.0, v);
    l2.apply(h1.data(), h2.data());
    for (double& v : h2) v = std::max(0.0, v);
    std::array<double, 4> out{};
    l3.apply(h2.data(), out.data());
    return out;
  }
};

struct EncoderLayer {
  S2AParams attn;
  LayerNorm ln1;
  Linear ffn1, ffn2;
  LayerNorm ln2;
};

struct DecoderLayer {
  S2AParams attn;
  LayerNorm ln1;
  Linear mlp1, mlp2;
  LayerNorm ln2;
  BoxHead breg;
  Linear cls;
};

struct ModelWeights {
  ModelConfig config;
  Linear embed;
  LayerNorm embed_ln;
  std::vector<EncoderLayer> encoder;
  BoxHead breg0;
  Linear cls0;
  std::vector<DecoderLayer> decoder;

  /// All-zero linear maps with identity LayerNorms, shaped for `cfg`.
  static ModelWeights zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.dim;
    ModelWeights m;
    m.config = cfg;
    m.embed = Linear(cfg.bands, c);
    m.embed_ln = LayerNorm(c);
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
      m.encoder.push_back({S2AParams(c, cfg.heads, cfg.points), LayerNorm(c), Linear(c, cfg.ffn()),
                           Linear(cfg.ffn(), c), LayerNorm(c)});
    m.breg0 = BoxHead(c);
    m.cls0 = Linear(c, cfg.num_classes);
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
      m.decoder.push_back({S2AParams(c, cfg.heads, cfg.points), LayerNorm(c), Linear(c, cfg.ffn()),
                           Linear(cfg.ffn(), c), LayerNorm(c), BoxHead(c), Linear(c, cfg.num_classes)});
    return m;
  }

  /// Calls f(name, values, shape) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    auto lin = [&](const std::string& p, Linear& l) {
      f(p + ".weight", l.w, std::vector<std::size_t>{l.out, l.in});
      f(p + ".bias", l.b, std::vector<std::size_t>{l.out});
    };
    auto ln = [&](const std::string& p, LayerNorm& n) {
      f(p + ".gamma", n.gamma, std::vector<std::size_t>{n.gamma.size()});
      f(p + ".beta", n.beta, std::vector<std::size_t>{n.beta.size()});
    };
    auto attn = [&](const std::string& p, S2AParams& a) {
      lin(p + ".offsets", a.offsets);
      lin(p + ".weights", a.weights);
      lin(p + ".value", a.value);
      lin(p + ".output", a.output);
      f(p + ".init", a.init, std::vector<std::size_t>{a.heads, a.points, 2});
    };
    auto head = [&](const std::string& p, BoxHead& h) {
      lin(p + ".0", h.l1);
      lin(p + ".1", h.l2);
      lin(p + ".2", h.l3);
    };
    lin("embed", embed);
    ln("embed_ln", embed_ln);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i);
      attn(p + ".attn", encoder[i].attn);
      ln(p + ".ln1", encoder[i].ln1);
      lin(p + ".ffn1", encoder[i].ffn1);
      lin(p + ".ffn2", encoder[i].ffn2);
      ln(p + ".ln2", encoder[i].ln2);
    }
    head("breg0", breg0);
    lin("cls0", cls0);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      const std::string p = "decoder." + std::to_string(i);
      attn(p + ".attn", decoder[i].attn);
      ln(p + ".ln1", decoder[i].ln1);
      lin(p + ".mlp1", decoder[i].mlp1);
      lin(p + ".mlp2", decoder[i].mlp2);
      ln(p + ".ln2", decoder[i].ln2);
      head(p + ".breg", decoder[i].breg);
      lin(p + ".cls", decoder[i].cls);
    }
  }
};

/// Seeded random weights: Xavier-uniform matrices, small uniform biases,
/// unit LayerNorms and the geometric initial offsets. Offset projections are
/// scaled down so sampling points start near their initial layout. Every
/// value is rounded through float so a save/load round trip is exact.
inline ModelWeights random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights m = ModelWeights::zeros(cfg);
  Rng rng(seed);
  m.visit([&](const std::string& name, std::vector<double>& v, const std::vector<std::size_t>& shape) {
    const auto ends_with = [&](const char* s) {
      const std::string suf(s);
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(".weight")) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      const double scale = name.find(".offsets.") != std::string::npos ? 0.1 : 1.0;
      for (double& x : v) x = scale * rng.uniform(-limit, limit);
    } else if (ends_with(".bias")) {
      for (double& x : v) x = rng.uniform(-0.05, 0.05);
    }
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  });
  return m;
}

inline void write_weights(ModelWeights weights, const std::filesystem::path& dir) {
  json tensors = json::array();
  std::vector<float> flat;
  weights.visit([&](const std::string& name, std::vector<double>& v, const std::vector<std::size_t>& shape) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", flat.size()}, {"count", v.size()}});
    for (double x : v) flat.push_back(static_cast<float>(x));
  });
  detail::write_f32(dir / "weights.bin", flat);
  detail::write_json(dir / "manifest.json", json{{"format", "hyperspod-weights"},
                                                 {"version", 1},
                                                 {"config", weights.config},
                                                 {"tensors", tensors}});
}

inline ModelWeights read_weights(const std::filesystem::path& dir) {
  const json manifest = detail::read_json(dir / "manifest.json");
  ModelConfig cfg;
  std::size_t total = 0;
  try {
    if (manifest.at("format").get<std::string>() != "hyperspod-weights")
      throw Error(Errc::malformed_header, "not a weights manifest");
    cfg = manifest.at("config").get<ModelConfig>();
    for (const auto& t : manifest.at("tensors")) total += t.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("weights manifest: ") + e.what());
  }
  ModelWeights m = ModelWeights::zeros(cfg);
  const auto flat = detail::read_f32(dir / "weights.bin", total);
  std::size_t idx = 0;
  m.visit([&](const std::string& name, std::vector<double>& v, const std::vector<std::size_t>&) {
    if (idx >= manifest.at("tensors").size())
      throw Error(Errc::shape_mismatch, "weights file lacks tensor " + name);
    const auto& t = manifest.at("tensors")[idx++];
    if (t.at("name").get<std::string>() != name || t.at("count").get<std::size_t>() != v.size())
      throw Error(Errc::shape_mismatch, "tensor " + name + " does not match the configuration");
    const auto off = t.at("offset").get<std::size_t>();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = flat[off + i];
  });
  return m;
}

// ---------------------------------------------------------------------------
// Tokens, position embeddings, sampling

struct TokenGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dim = 0;
  std::vector<double> pixels;  // (row * width + col) * dim + channel
  std::vector<double> global;

  const double* token(std::size_t i) const { return pixels.data() + i * dim; }
  double* token(std::size_t i) { return pixels.data() + i * dim; }
};

/// 2D sinusoidal embedding of normalized coordinates (nx, ny) in [0, 1]:
/// C/2 channels for y then C/2 for x, alternating sin/cos with
/// frequencies 10000^(2 floor(i/2) / (C/2)).
inline void sine_position(double nx, double ny, std::size_t dim, double* out) {
  const std::size_t npf = dim / 2;
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const double e = (axis == 0 ? ny : nx) * two_pi;
    for (std::size_t i = 0; i < npf; ++i) {
      const double t = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(npf));
      out[axis * npf + i] = (i % 2 == 0) ? std::sin(e / t) : std::cos(e / t);
    }
  }
}

/// Embedding table for every pixel center ((col + 0.5) / W, (row + 0.5) / H).
inline std::vector<double> position_table(std::size_t height, std::size_t width, std::size_t dim) {
  std::vector<double> table(height * width * dim);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c)
      sine_position((static_cast<double>(c) + 0.5) / static_cast<double>(width),
                    (static_cast<double>(r) + 0.5) / static_cast<double>(height), dim,
                    table.data() + (r * width + c) * dim);
  return table;
}

enum class Padding { zero, periodic };

/// Four-corner interpolation weights for the position (x, y) on an integer
/// grid. With a = x - floor(x), b = y - floor(y) the corners and weights are
///   p1 (x0+1, y0+1): a b        p2 (x0, y0+1): b (1 - a)
///   p3 (x0+1, y0):   a (1 - b)  p4 (x0, y0):   (1 - a)(1 - b)
struct BilinearCoefficients {
  std::array<long, 4> x{};
  std::array<long, 4> y{};
  std::array<double, 4> eps{};
};

inline BilinearCoefficients bilinear_coefficients(double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double a = x - fx, b = y - fy;
  const auto x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  return {{x0 + 1, x0, x0 + 1, x0},
          {y0 + 1, y0 + 1, y0, y0},
          {a * b, b * (1.0 - a), a * (1.0 - b), (1.0 - a) * (1.0 - b)}};
}

/// Read-only view of an H x W map of `stride`-wide feature vectors.
struct FeatureGrid {
  const double* data = nullptr;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t stride = 0;
};

/// out[0..count) += weight * bili(grid channels [first, first+count), (x, y)).
inline void bilinear_accumulate(const FeatureGrid& g, std::size_t first, std::size_t count, double x,
                                double y, double weight, Padding padding, double* out) {
  if (!std::isfinite(x) || !std::isfinite(y)) return;
  const auto co = bilinear_coefficients(x, y);
  const auto H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (int z = 0; z < 4; ++z) {
    long cx = co.x[z], cy = co.y[z];
    if (padding == Padding::periodic) {
      cx = ((cx % W) + W) % W;
      cy = ((cy % H) + H) % H;
    } else if (cx < 0 || cy < 0 || cx >= W || cy >= H) {
      continue;
    }
    const double w = weight * co.eps[z];
    if (w == 0.0) continue;
    const double* v = g.data + (static_cast<std::size_t>(cy) * g.width + static_cast<std::size_t>(cx)) * g.stride + first;
    for (std::size_t c = 0; c < count; ++c) out[c] += w * v[c];
  }
}

inline std::vector<double> bilinear_sample(const FeatureGrid& g, double x, double y,
                                           Padding padding = Padding::zero) {
  std::vector<double> out(g.stride, 0.0);
  bilinear_accumulate(g, 0, g.stride, x, y, 1.0, padding, out.data());
  return out;
}

/// Interpolation weight of the global token at (x, y): the token occupies
/// the nine integer points {-1, 0, 1}^2 and every other integer point is zero.
inline double self_excited_weight(double x, double y) {
  if (!std::isfinite(x) || !std::isfinite(y)) return 0.0;
  const auto co = bilinear_coefficients(x, y);
  double w = 0.0;
  for (int z = 0; z < 4; ++z)
    if (std::abs(co.x[z]) <= 1 && std::abs(co.y[z]) <= 1) w += co.eps[z];
  return w;
}

inline std::vector<double> self_excited_value(std::span<const double> global, double x, double y) {
  const double w = self_excited_weight(x, y);
  std::vector<double> out(global.size());
  for (std::size_t i = 0; i < global.size(); ++i) out[i] = w * global[i];
  return out;
}

/// Where a query samples: pixel-branch reference and per-axis offset scale
/// (grid index units), and the global-branch reference in the self-excited
/// space.
struct SamplingGeometry {
  double ref_x = 0.0;
  double ref_y = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  double global_x = 0.0;
  double global_y = 0.0;
};

/// Optional record of one attention evaluation.
struct AttentionTrace {
  std::vector<double> weights;           // M x 2K normalized
  std::vector<double> head_sums;         // M
  std::vector<std::array<double, 2>> pixel_points;   // M x K
  std::vector<std::array<double, 2>> global_points;  // M x K
};

/// Concatenated head outputs v^1..v^M for one query. `query` already
/// includes its position embedding. Attention logits are normalized by a
/// softmax over the 2K pixel+global logits of each head.
inline void s2a_sample(const S2AParams& p, const double* query, const SamplingGeometry& geo,
                       const FeatureGrid& values, const double* global_value, Padding padding,
                       double* concat, AttentionTrace* trace = nullptr) {
  const std::size_t M = p.heads, K = p.points, C = p.dim, ch = C / M;
  std::vector<double> off(p.offsets.out), logits(p.weights.out);
  p.offsets.apply(query, off.data());
  p.weights.apply(query, logits.data());
  std::fill(concat, concat + C, 0.0);
  if (trace) {
    trace->weights.assign(M * 2 * K, 0.0);
    trace->head_sums.assign(M, 0.0);
    trace->pixel_points.assign(M * K, {});
    trace->global_points.assign(M * K, {});
  }
  std::vector<double> a(2 * K);
  for (std::size_t m = 0; m < M; ++m) {
    const double* lg = logits.data() + m * 2 * K;
    const double mx = *std::max_element(lg, lg + 2 * K);
    double sum = 0.0;
    for (std::size_t j = 0; j < 2 * K; ++j) sum += (a[j] = std::exp(lg[j] - mx));
    for (double& v : a) v /= sum;
    double* out = concat + m * ch;
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t mk = (m * K + k) * 2;
      const double px = geo.ref_x + (off[mk] + p.init[mk]) * geo.scale_x;
      const double py = geo.ref_y + (off[mk + 1] + p.init[mk + 1]) * geo.scale_y;
      bilinear_accumulate(values, m * ch, ch, px, py, a[k], padding, out);

      const std::size_t gk = 2 * M * K + mk;
      const double gx = geo.global_x + off[gk] + p.init[mk];
      const double gy = geo.global_y + off[gk + 1] + p.init[mk + 1];
      const double gw = a[K + k] * self_excited_weight(gx, gy);
      if (gw != 0.0)
        for (std::size_t c = 0; c < ch; ++c) out[c] += gw * global_value[m * ch + c];
      if (trace) {
        trace->pixel_points[m * K + k] = {px, py};
        trace->global_points[m * K + k] = {gx, gy};
      }
    }
    if (trace) {
      double s = 0.0;
      for (std::size_t j = 0; j < 2 * K; ++j) s += (trace->weights[m * 2 * K + j] = a[j]);
      trace->head_sums[m] = s;
    }
  }
}

/// Global-branch reference of a normalized position: [0, 1] maps to [-1, 1].
inline std::pair<double, double> global_reference(double nx, double ny) {
  return {2.0 * nx - 1.0, 2.0 * ny - 1.0};
}

struct EncoderOptions {
  Padding padding = Padding::zero;
  unsigned workers = 1;
};

/// Pre-residual self-attention output for every token: linear(p + concat(v)).
/// `pos` is the per-pixel embedding table; the global token uses a zero
/// embedding and the image center as its pixel-branch reference.
inline TokenGrid self_s2a(const TokenGrid& in, const S2AParams& p, const std::vector<double>& pos,
                          const EncoderOptions& opt = {}) {
  const std::size_t H = in.height, W = in.width, C = in.dim, N = H * W;
  if (p.dim != C || pos.size() != N * C) throw Error(Errc::shape_mismatch, "self-attention shapes");
  std::vector<double> values(N * C), gvalue(C);
  parallel_for(N, opt.workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) p.value.apply(in.token(i), values.data() + i * C);
  });
  p.value.apply(in.global.data(), gvalue.data());
  const FeatureGrid grid{values.data(), H, W, C};

  TokenGrid out{H, W, C, std::vector<double>(N * C), std::vector<double>(C)};
  auto one = [&](const double* token, const double* embed, const SamplingGeometry& geo, double* dst) {
    std::vector<double> q(C), concat(C);
    for (std::size_t c = 0; c < C; ++c) q[c] = token[c] + (embed ? embed[c] : 0.0);
    s2a_sample(p, q.data(), geo, grid, gvalue.data(), opt.padding, concat.data());
    for (std::size_t c = 0; c < C; ++c) q[c] = token[c] + concat[c];
    p.output.apply(q.data(), dst);
  };
  parallel_for(N, opt.workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t r = i / W, c = i % W;
      const auto [gx, gy] = global_reference((c + 0.5) / static_cast<double>(W), (r + 0.5) / static_cast<double>(H));
      one(in.token(i), pos.data() + i * C,
          {static_cast<double>(c), static_cast<double>(r), 1.0, 1.0, gx, gy}, out.token(i));
    }
  });
  one(in.global.data(), nullptr, {(W - 1) / 2.0, (H - 1) / 2.0, 1.0, 1.0, 0.0, 0.0}, out.global.data());
  return out;
}

/// F~ = LN(S2A(F) + F); F' = LN(FFN(F~) + F~), applied to pixel and global tokens.
inline TokenGrid encoder_layer(const TokenGrid& in, const EncoderLayer& L, const std::vector<double>& pos,
                               const EncoderOptions& opt = {}) {
  TokenGrid out = self_s2a(in, L.attn, pos, opt);
  const std::size_t C = in.dim;
  auto finish = [&](const double* prev, double* x) {
    for (std::size_t c = 0; c < C; ++c) x[c] += prev[c];
    L.ln1.apply(x);
    std::vector<double> h(L.ffn1.out), f(C);
    L.ffn1.apply(x, h.data());
    for (double& v : h) v = std::max(0.0, v);
    L.ffn2.apply(h.data(), f.data());
    for (std::size_t c = 0; c < C; ++c) x[c] += f[c];
    L.ln2.apply(x);
  };
  parallel_for(in.height * in.width, opt.workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) finish(in.token(i), out.token(i));
  });
  finish(in.global.data(), out.global.data());
  return out;
}

/// P0 = LN(linear(X / v)) per pixel; g0 = mean of the pixel tokens.
inline TokenGrid tokenize(const HyperCube& cube, double v, const Linear& embed, const LayerNorm& ln,
                          unsigned workers = 1) {
  if (!(v > 0.0)) throw Error(Errc::invalid_argument, "normalization constant must be positive");
  if (embed.in != cube.bands())
    throw Error(Errc::shape_mismatch, "embedding expects " + std::to_string(embed.in) + " bands, cube has " +
                                          std::to_string(cube.bands()));
  const std::size_t N = cube.pixels(), C = embed.out;
  TokenGrid t{cube.height(), cube.width(), C, std::vector<double>(N * C), std::vector<double>(C, 0.0)};
  parallel_for(N, workers, [&](std::size_t b, std::size_t e) {
    std::vector<double> x(cube.bands());
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t k = 0; k < cube.bands(); ++k) x[k] = cube.band(k)[i] / v;
      embed.apply(x.data(), t.token(i));
      ln.apply(t.token(i));
    }
  });
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) t.global[c] += t.token(i)[c];
  for (double& g : t.global) g /= static_cast<double>(N);
  return t;
}

// ---------------------------------------------------------------------------
// Anchors and decoder

struct AnchorState {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<std::size_t> source_pixels;  // pixel that seeded each query
  std::vector<BBox> boxes;       // b_d, reference for the next layer
  std::vector<BBox> boxes_hat;   // b^_d (same values as b_d in a forward pass)
  std::vector<BBox> boxes_pred;  // b^pred_d
  std::vector<double> scores;    // Q x num_classes
  std::vector<double> queries;   // Q x dim

  std::size_t size() const { return boxes.size(); }
};

namespace detail {

inline std::array<double, 4> box_array(const BBox& b) { return {b.cx, b.cy, b.w, b.h}; }

inline BBox refine(const std::array<double, 4>& delta, const BBox& prev) {
  const auto p = box_array(prev);
  return {sigmoid(delta[0] + inverse_sigmoid(p[0])), sigmoid(delta[1] + inverse_sigmoid(p[1])),
          sigmoid(delta[2] + inverse_sigmoid(p[2])), sigmoid(delta[3] + inverse_sigmoid(p[3]))};
}

}  // namespace detail

/// Candidate anchor per pixel, b_int = [(col + 0.5)/W, (row + 0.5)/H, s/W, s/H],
/// refined by the regression head; the q_match pixels with the highest max
/// class score seed the decoder queries (ties keep pixel order). Queries
/// start as all-ones vectors.
inline AnchorState init_anchors(const TokenGrid& tokens, const BoxHead& breg, const Linear& cls,
                                double s, std::size_t q_match) {
  const std::size_t N = tokens.height * tokens.width, C = tokens.dim, NC = cls.out;
  if (q_match < 1 || q_match > N)
    throw Error(Errc::invalid_argument, "q_match must lie in [1, H*W]");
  const double W = static_cast<double>(tokens.width), H = static_cast<double>(tokens.height);
  std::vector<BBox> boxes(N);
  std::vector<double> scores(N * NC), best(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double col = static_cast<double>(i % tokens.width), row = static_cast<double>(i / tokens.width);
    const BBox b_int{(col + 0.5) / W, (row + 0.5) / H, s / W, s / H};
    boxes[i] = detail::refine(breg.apply(tokens.token(i)), b_int);
    cls.apply(tokens.token(i), scores.data() + i * NC);
    best[i] = -1.0;
    for (std::size_t c = 0; c < NC; ++c) {
      double& v = scores[i * NC + c];
      v = sigmoid(v);
      best[i] = std::max(best[i], v);
    }
  }
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return best[a] > best[b]; });
  order.resize(q_match);

  AnchorState st;
  st.dim = C;
  st.num_classes = NC;
  st.source_pixels = order;
  for (std::size_t i : order) {
    st.boxes.push_back(boxes[i]);
    st.scores.insert(st.scores.end(), scores.begin() + static_cast<std::ptrdiff_t>(i * NC),
                     scores.begin() + static_cast<std::ptrdiff_t>((i + 1) * NC));
  }
  st.boxes_hat = st.boxes;
  st.boxes_pred = st.boxes;
  st.queries.assign(q_match * C, 1.0);
  return st;
}

/// One decoder layer. Each query attends around the center of its anchor
/// with initial sampling offsets scaled by (w W / 2K, h H / 2K), so the
/// outermost points start on the box boundary. Queries do not attend to each
/// other. Box update follows the look-forward-twice scheme:
///   b^_d = Sig(breg(q_d) + InSig(b_{d-1})),  b_d = b^_d (detached),
///   b^pred_d = Sig(breg(q_d) + InSig(b^_{d-1})).
inline AnchorState decode_layer(const AnchorState& st, const TokenGrid& tokens, const DecoderLayer& L,
                                const EncoderOptions& opt = {}) {
  const std::size_t C = st.dim, Q = st.size(), NC = st.num_classes;
  const std::size_t H = tokens.height, W = tokens.width, N = H * W;
  if (tokens.dim != C || L.attn.dim != C) throw Error(Errc::shape_mismatch, "decoder dims");
  std::vector<double> values(N * C), gvalue(C);
  parallel_for(N, opt.workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) L.attn.value.apply(tokens.token(i), values.data() + i * C);
  });
  L.attn.value.apply(tokens.global.data(), gvalue.data());
  const FeatureGrid grid{values.data(), H, W, C};
  const double K = static_cast<double>(L.attn.points);

  AnchorState out = st;
  parallel_for(Q, opt.workers, [&](std::size_t b, std::size_t e) {
    std::vector<double> q(C), embed(C), concat(C), h(L.mlp1.out), f(C);
    for (std::size_t i = b; i < e; ++i) {
      const BBox& box = st.boxes[i];
      const double* prev = st.queries.data() + i * C;
      sine_position(box.cx, box.cy, C, embed.data());
      for (std::size_t c = 0; c < C; ++c) q[c] = prev[c] + embed[c];
      const auto [gx, gy] = global_reference(box.cx, box.cy);
      const SamplingGeometry geo{box.cx * static_cast<double>(W) - 0.5, box.cy * static_cast<double>(H) - 0.5,
                                 box.w * static_cast<double>(W) / (2.0 * K),
                                 box.h * static_cast<double>(H) / (2.0 * K), gx, gy};
      s2a_sample(L.attn, q.data(), geo, grid, gvalue.data(), opt.padding, concat.data());
      for (std::size_t c = 0; c < C; ++c) q[c] = prev[c] + concat[c];
      double* x = out.queries.data() + i * C;
      L.attn.output.apply(q.data(), x);
      for (std::size_t c = 0; c < C; ++c) x[c] += prev[c];
      L.ln1.apply(x);
      L.mlp1.apply(x, h.data());
      for (double& v : h) v = std::max(0.0, v);
      L.mlp2.apply(h.data(), f.data());
      for (std::size_t c = 0; c < C; ++c) x[c] += f[c];
      L.ln2.apply(x);

      const auto delta = L.breg.apply(x);
      out.boxes_hat[i] = detail::refine(delta, st.boxes[i]);
      out.boxes[i] = out.boxes_hat[i];
      out.boxes_pred[i] = detail::refine(delta, st.boxes_hat[i]);
      L.cls.apply(x, out.scores.data() + i * NC);
      for (std::size_t c = 0; c < NC; ++c) out.scores[i * NC + c] = sigmoid(out.scores[i * NC + c]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Full forward pass

struct ForwardConfig {
  std::size_t encoder_layers = defaults::kEncoderLayers;
  std::size_t decoder_layers = defaults::kDecoderLayers;
  std::size_t q_match = defaults::kQueryMatch;  // capped at H*W
  double anchor_size = defaults::kAnchorSize;
  double v = defaults::kRadianceScaleSpod;
  double nms_iou = defaults::kNmsIou;
  unsigned workers = 1;
};

inline ForwardConfig parse_forward_config(const json& j) {
  ForwardConfig c;
  try {
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.q_match = j.value("q_match", c.q_match);
    c.anchor_size = j.value("anchor_size", c.anchor_size);
    c.v = j.value("v", c.v);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_header, std::string("forward config: ") + e.what());
  }
  return c;
}

/// Every box produced during a pass, for range checks.
struct ForwardTrace {
  std::vector<BBox> boxes;
};

/// Tokenize, encode, seed anchors, decode, then keep the top q_match of the
/// Q x classes predictions and apply per-class NMS. Boxes are returned in
/// pixel units; class ids are class index + 1.
inline std::vector<Detection> run_forward(const HyperCube& cube, const ModelWeights& w,
                                          const ForwardConfig& cfg, ForwardTrace* trace = nullptr) {
  w.config.validate();
  if (cube.bands() != w.config.bands)
    throw Error(Errc::shape_mismatch, "weights expect " + std::to_string(w.config.bands) + " bands, cube has " +
                                          std::to_string(cube.bands()));
  if (cfg.encoder_layers != w.encoder.size() || cfg.decoder_layers != w.decoder.size())
    throw Error(Errc::shape_mismatch, "layer counts differ between config and weights");
  const EncoderOptions opt{Padding::zero, cfg.workers};
  TokenGrid tokens = tokenize(cube, cfg.v, w.embed, w.embed_ln, cfg.workers);
  const auto pos = position_table(cube.height(), cube.width(), w.config.dim);
  for (const auto& layer : w.encoder) tokens = encoder_layer(tokens, layer, pos, opt);

  const std::size_t q = std::min(cfg.q_match, cube.pixels());
  AnchorState st = init_anchors(tokens, w.breg0, w.cls0, cfg.anchor_size, q);
  if (trace) trace->boxes.insert(trace->boxes.end(), st.boxes.begin(), st.boxes.end());
  for (const auto& layer : w.decoder) {
    st = decode_layer(st, tokens, layer, opt);
    if (trace) {
      trace->boxes.insert(trace->boxes.end(), st.boxes.begin(), st.boxes.end());
      trace->boxes.insert(trace->boxes.end(), st.boxes_pred.begin(), st.boxes_pred.end());
    }
  }

  const std::size_t NC = st.num_classes;
  std::vector<std::size_t> order(st.size() * NC);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return st.scores[a] > st.scores[b]; });
  order.resize(std::min(order.size(), cfg.q_match));
  std::vector<Detection> dets;
  for (std::size_t k : order) {
    const BBox b = denormalize(st.boxes_pred[k / NC], static_cast<int>(cube.width()), static_cast<int>(cube.height()));
    dets.push_back({b, static_cast<int>(k % NC) + 1, st.scores[k]});
  }
  return nms_per_class(dets, cfg.nms_iou);
}

}  // namespace hyperspod
