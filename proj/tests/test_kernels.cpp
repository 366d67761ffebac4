#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "hyperspod/kernel_check.hpp"
#include "support.hpp"

using namespace hyperspod;
using testing_support::TempDir;

namespace {

double tent(double t) { return std::max(0.0, 1.0 - std::abs(t)); }

// Interpolation written as a sum of tent products over every grid point.
std::vector<double> naive_sample(const std::vector<double>& grid, std::size_t H, std::size_t W, std::size_t C,
                                 std::size_t first, std::size_t count, double x, double y) {
  std::vector<double> out(count, 0.0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double w = tent(x - static_cast<double>(c)) * tent(y - static_cast<double>(r));
      if (w == 0.0) continue;
      for (std::size_t k = 0; k < count; ++k) out[k] += w * grid[(r * W + c) * C + first + k];
    }
  return out;
}

double naive_global_weight(double x, double y) {
  double w = 0.0;
  for (int u = -1; u <= 1; ++u)
    for (int v = -1; v <= 1; ++v) w += tent(x - u) * tent(y - v);
  return w;
}

std::vector<double> matvec(const Linear& l, const std::vector<double>& x) {
  std::vector<double> y(l.out);
  for (std::size_t o = 0; o < l.out; ++o) {
    y[o] = l.b[o];
    for (std::size_t i = 0; i < l.in; ++i) y[o] += l.w[o * l.in + i] * x[i];
  }
  return y;
}

// Dense re-derivation of one self-attention output.
std::vector<double> naive_token(const S2AParams& p, const std::vector<double>& token, const std::vector<double>& embed,
                                const std::vector<double>& values, const std::vector<double>& gvalue, std::size_t H,
                                std::size_t W, double rx, double ry, double gx0, double gy0) {
  const std::size_t M = p.heads, K = p.points, C = p.dim, ch = C / M;
  std::vector<double> q(C);
  for (std::size_t c = 0; c < C; ++c) q[c] = token[c] + embed[c];
  const auto off = matvec(p.offsets, q);
  const auto lg = matvec(p.weights, q);
  std::vector<double> concat(C, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    double z = 0.0;
    for (std::size_t j = 0; j < 2 * K; ++j) z += std::exp(lg[m * 2 * K + j]);
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t mk = (m * K + k) * 2;
      const double ap = std::exp(lg[m * 2 * K + k]) / z;
      const double ag = std::exp(lg[m * 2 * K + K + k]) / z;
      const auto v = naive_sample(values, H, W, C, m * ch, ch, rx + off[mk] + p.init[mk], ry + off[mk + 1] + p.init[mk + 1]);
      const double gw = naive_global_weight(gx0 + off[2 * M * K + mk] + p.init[mk],
                                            gy0 + off[2 * M * K + mk + 1] + p.init[mk + 1]);
      for (std::size_t c = 0; c < ch; ++c) concat[m * ch + c] += ap * v[c] + ag * gw * gvalue[m * ch + c];
    }
  }
  std::vector<double> pre(C);
  for (std::size_t c = 0; c < C; ++c) pre[c] = token[c] + concat[c];
  return matvec(p.output, pre);
}

ModelConfig tiny(std::size_t bands = 4) { return kcheck::tiny_config(bands); }

}  // namespace

TEST(Bilinear, HandOracles) {
  // 2x2 grid of scalars, row-major: (0,0)=4 (1,0)=2 (0,1)=3 (1,1)=1
  const std::vector<double> g{4, 3, 2, 1};
  const FeatureGrid grid{g.data(), 2, 2, 1};
  // a = 0.25, b = 0.75: weights ab, b(1-a), a(1-b), (1-a)(1-b) on p1..p4 = 1,2,3,4
  EXPECT_NEAR(bilinear_sample(grid, 0.25, 0.75)[0], 2.25, 1e-12);
  EXPECT_NEAR(bilinear_sample(grid, 0.5, 0.5)[0], 2.5, 1e-12);
  EXPECT_EQ(bilinear_sample(grid, 1.0, 0.0)[0], 3.0);
  EXPECT_EQ(bilinear_sample(grid, 5.0, 5.0)[0], 0.0);
  EXPECT_NEAR(bilinear_sample(grid, -0.5, 0.0)[0], 2.0, 1e-12);  // half of (0,0)
  const auto co = bilinear_coefficients(0.25, 0.75);
  EXPECT_DOUBLE_EQ(co.eps[0], 0.1875);
  EXPECT_DOUBLE_EQ(co.eps[1], 0.5625);
  EXPECT_DOUBLE_EQ(co.eps[2], 0.0625);
  EXPECT_DOUBLE_EQ(co.eps[3], 0.1875);
}

TEST(Bilinear, MatchesTentSumAndPeriodicWraps) {
  Rng rng(1);
  std::vector<double> g(5 * 6 * 3);
  for (double& v : g) v = rng.normal();
  const FeatureGrid grid{g.data(), 5, 6, 3};
  for (int t = 0; t < 1000; ++t) {
    const double x = rng.uniform(-2.0, 7.0), y = rng.uniform(-2.0, 6.0);
    const auto a = bilinear_sample(grid, x, y);
    const auto b = naive_sample(g, 5, 6, 3, 0, 3, x, y);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(a[static_cast<std::size_t>(c)], b[static_cast<std::size_t>(c)], 1e-12);
    const auto p = bilinear_sample(grid, x, y, Padding::periodic);
    const auto q = bilinear_sample(grid, x + 6.0, y - 5.0, Padding::periodic);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(p[static_cast<std::size_t>(c)], q[static_cast<std::size_t>(c)], 1e-9);
  }
}

TEST(SelfExcited, ValuesAndContinuity) {
  const std::vector<double> g{1.0, -2.0, 0.5};
  EXPECT_EQ(self_excited_value(g, 0.0, 0.0), g);
  EXPECT_EQ(self_excited_value(g, 2.5, 0.0), std::vector<double>(3, 0.0));
  const auto half = self_excited_value(g, 1.5, 0.0);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(half[static_cast<std::size_t>(c)], 0.5 * g[static_cast<std::size_t>(c)], 1e-15);
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    const double x = rng.uniform(-3.0, 3.0), y = rng.uniform(-3.0, 3.0);
    EXPECT_NEAR(self_excited_weight(x, y), naive_global_weight(x, y), 1e-12);
    EXPECT_NEAR(self_excited_weight(x, y), self_excited_weight(x + 1e-7, y - 1e-7), 1e-6);
  }
}

TEST(KernelCheck, SuitePasses) {
  for (const auto& r : run_kernel_checks()) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(LayerNormTest, ZeroVarianceAndDirectOracle) {
  LayerNorm ln(4);
  std::vector<double> x{3.0, 3.0, 3.0, 3.0};
  ln.apply(x.data());
  EXPECT_EQ(x, std::vector<double>(4, 0.0));

  Rng rng(3);
  HyperCube cube = HyperCube::filled(2, 2, 3, 0.0f);
  for (std::size_t i = 0; i < 12; ++i) cube.band(i / 4)[i % 4] = static_cast<float>(rng.uniform(0.0, 3000.0));
  const auto w = random_weights(tiny(3), 4);
  const auto t = tokenize(cube, 3000.0, w.embed, w.embed_ln);
  std::vector<double> gsum(32, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> x0(3);
    for (std::size_t b = 0; b < 3; ++b) x0[b] = cube.band(b)[i] / 3000.0;
    auto y = matvec(w.embed, x0);
    double mean = 0.0, var = 0.0;
    for (double v : y) mean += v / 32.0;
    for (double v : y) var += (v - mean) * (v - mean) / 32.0;
    for (std::size_t c = 0; c < 32; ++c) {
      const double expect = (y[c] - mean) / std::sqrt(var + 1e-5);
      EXPECT_NEAR(t.token(i)[c], expect, 1e-6);
      gsum[c] += t.token(i)[c] / 4.0;
    }
  }
  for (std::size_t c = 0; c < 32; ++c) EXPECT_NEAR(t.global[c], gsum[c], 1e-12);
}

TEST(Tokenize, ConstantInputGivesZeroTokens) {
  ModelWeights w = ModelWeights::zeros(tiny(4));
  for (std::size_t c = 0; c < 4; ++c) w.embed.w[c * 4 + c] = 1.0;  // identity on the first channels
  const auto cube = HyperCube::filled(3, 3, 4, 1200.0f);
  const auto t = tokenize(cube, 3000.0, w.embed, w.embed_ln);
  // each token is (0.4, 0.4, 0.4, 0.4, 0, ...) which has variance; uniform channel input does not
  ModelWeights u = ModelWeights::zeros(tiny(4));
  for (std::size_t c = 0; c < 32; ++c) u.embed.w[c * 4] = 1.0;
  const auto z = tokenize(cube, 3000.0, u.embed, u.embed_ln);
  for (double v : z.pixels) EXPECT_EQ(v, 0.0);
  for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(z.global[c], z.token(4)[c]);
  EXPECT_NE(t.token(0)[0], 0.0);
  EXPECT_THROW(tokenize(cube, 0.0, w.embed, w.embed_ln), Error);
}

TEST(SelfS2A, MatchesNaiveLoop) {
  const auto w = random_weights(tiny(4), 5);
  const auto& p = w.encoder.front().attn;
  const std::size_t H = 5, W = 4, C = 32;
  Rng rng(6);
  TokenGrid t{H, W, C, std::vector<double>(H * W * C), std::vector<double>(C)};
  for (double& v : t.pixels) v = rng.normal();
  for (double& v : t.global) v = rng.normal();
  const auto pos = position_table(H, W, C);
  const auto out = self_s2a(t, p, pos);

  std::vector<double> values(H * W * C), gvalue = matvec(p.value, t.global);
  for (std::size_t i = 0; i < H * W; ++i) {
    const auto v = matvec(p.value, std::vector<double>(t.token(i), t.token(i) + C));
    std::copy(v.begin(), v.end(), values.begin() + static_cast<std::ptrdiff_t>(i * C));
  }
  for (std::size_t i = 0; i < H * W; ++i) {
    const std::size_t r = i / W, c = i % W;
    const double gx = 2.0 * (c + 0.5) / W - 1.0, gy = 2.0 * (r + 0.5) / H - 1.0;
    const auto expect = naive_token(p, std::vector<double>(t.token(i), t.token(i) + C),
                                    std::vector<double>(pos.begin() + static_cast<std::ptrdiff_t>(i * C),
                                                        pos.begin() + static_cast<std::ptrdiff_t>((i + 1) * C)),
                                    values, gvalue, H, W, static_cast<double>(c), static_cast<double>(r), gx, gy);
    for (std::size_t k = 0; k < C; ++k) EXPECT_NEAR(out.token(i)[k], expect[k], 1e-9);
  }
  const auto g = naive_token(p, t.global, std::vector<double>(C, 0.0), values, gvalue, H, W, (W - 1) / 2.0,
                             (H - 1) / 2.0, 0.0, 0.0);
  for (std::size_t k = 0; k < C; ++k) EXPECT_NEAR(out.global[k], g[k], 1e-9);
}

TEST(SelfS2A, DeltaAttentionReturnsSampledValue) {
  S2AParams p(32, 8, 4);
  // head logits: pixel point k=0 dominates
  for (std::size_t m = 0; m < 8; ++m)
    for (std::size_t j = 0; j < 8; ++j) p.weights.b[m * 8 + j] = j == 0 ? 0.0 : -1e9;
  Rng rng(7);
  std::vector<double> values(6 * 6 * 32), gv(32, 5.0), q(32, 0.0), out(32);
  for (double& v : values) v = rng.normal();
  const FeatureGrid grid{values.data(), 6, 6, 32};
  AttentionTrace tr;
  s2a_sample(p, q.data(), {2.0, 3.0, 1.0, 1.0, 0.0, 0.0}, grid, gv.data(), Padding::zero, out.data(), &tr);
  // head 0 looks at (+1, 0), head 2 at (0, +1)
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(out[c], values[(3 * 6 + 3) * 32 + c], 1e-12);
    EXPECT_NEAR(out[8 + c], values[(4 * 6 + 2) * 32 + 8 + c], 1e-12);
  }
  for (double s : tr.head_sums) EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(InitialOffsets, SquareVerticesAndMidpoints) {
  const auto init = S2AParams::initial_offsets(8, 4);
  for (std::size_t m = 0; m < 8; ++m)
    for (std::size_t k = 0; k < 4; ++k) {
      const double x = init[(m * 4 + k) * 2], y = init[(m * 4 + k) * 2 + 1];
      // on the boundary of the (2k+2)-wide square, at a vertex or an edge midpoint
      EXPECT_NEAR(std::max(std::abs(x), std::abs(y)), k + 1.0, 1e-12);
      const double mn = std::min(std::abs(x), std::abs(y));
      EXPECT_TRUE(std::abs(mn) < 1e-12 || std::abs(mn - (k + 1.0)) < 1e-12);
    }
}

TEST(Anchors, ZeroHeadsKeepInitialBoxes) {
  const std::size_t H = 4, W = 5, C = 32;
  Rng rng(8);
  TokenGrid t{H, W, C, std::vector<double>(H * W * C), std::vector<double>(C)};
  for (double& v : t.pixels) v = rng.normal();
  BoxHead zero(C);
  Linear cls(C, 3);
  const auto st = init_anchors(t, zero, cls, 1.0, H * W);
  ASSERT_EQ(st.size(), H * W);
  for (std::size_t i = 0; i < st.size(); ++i) {
    const std::size_t px = st.source_pixels[i];
    const BBox expect{(px % W + 0.5) / W, (px / W + 0.5) / H, 1.0 / W, 1.0 / H};
    EXPECT_NEAR(st.boxes[i].cx, expect.cx, 1e-12);
    EXPECT_NEAR(st.boxes[i].cy, expect.cy, 1e-12);
    EXPECT_NEAR(st.boxes[i].w, expect.w, 1e-12);
    EXPECT_NEAR(st.boxes[i].h, expect.h, 1e-12);
  }
  for (double s : st.scores) EXPECT_EQ(s, 0.5);
  for (double q : st.queries) EXPECT_EQ(q, 1.0);
  EXPECT_THROW(init_anchors(t, zero, cls, 1.0, 0), Error);
  EXPECT_THROW(init_anchors(t, zero, cls, 1.0, H * W + 1), Error);
}

TEST(Anchors, TopKMatchesSortOracle) {
  const std::size_t H = 6, W = 6, C = 32;
  const auto w = random_weights(tiny(), 9);
  Rng rng(10);
  TokenGrid t{H, W, C, std::vector<double>(H * W * C), std::vector<double>(C)};
  for (double& v : t.pixels) v = rng.normal();
  const auto st = init_anchors(t, w.breg0, w.cls0, 1.0, 10);
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < H * W; ++i) {
    const auto s = matvec(w.cls0, std::vector<double>(t.token(i), t.token(i) + C));
    keyed.push_back({-*std::max_element(s.begin(), s.end()), i});
  }
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(st.source_pixels[k], keyed[k].second);
}

TEST(Decoder, ZeroHeadsAreAFixpoint) {
  const auto cfg = tiny();
  ModelWeights w = random_weights(cfg, 11);
  DecoderLayer& L = w.decoder.front();
  L.breg = BoxHead(cfg.dim);
  L.cls = Linear(cfg.dim, cfg.num_classes);
  const auto cube = kcheck::random_cube(6, 6, 4, 12);
  const auto tokens = tokenize(cube, 3000.0, w.embed, w.embed_ln);
  const auto st = init_anchors(tokens, w.breg0, w.cls0, 1.0, 12);
  const auto out = decode_layer(st, tokens, L);
  for (std::size_t i = 0; i < st.size(); ++i) {
    EXPECT_NEAR(out.boxes[i].cx, st.boxes[i].cx, 1e-12);
    EXPECT_NEAR(out.boxes[i].w, st.boxes[i].w, 1e-12);
    EXPECT_NEAR(out.boxes_pred[i].cy, st.boxes_hat[i].cy, 1e-12);
  }
  for (double s : out.scores) EXPECT_EQ(s, 0.5);
}

TEST(Weights, RoundTripIsExact) {
  TempDir dir("weights");
  const auto w = random_weights(tiny(), 13);
  write_weights(w, dir.path());
  auto back = read_weights(dir.path());
  // an unset FFN width is stored resolved
  ModelConfig expect = w.config;
  expect.ffn_dim = expect.ffn();
  EXPECT_EQ(back.config, expect);
  std::vector<std::vector<double>> a, b;
  ModelWeights wc = w;
  wc.visit([&](const std::string&, std::vector<double>& v, const auto&) { a.push_back(v); });
  back.visit([&](const std::string&, std::vector<double>& v, const auto&) { b.push_back(v); });
  EXPECT_EQ(a, b);
}

TEST(Forward, ShapeMismatch) {
  const auto w = random_weights(tiny(4), 14);
  try {
    run_forward(kcheck::random_cube(4, 4, 5, 1), w, ForwardConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_mismatch);
  }
  ForwardConfig shallow;
  shallow.encoder_layers = 2;
  EXPECT_THROW(run_forward(kcheck::random_cube(4, 4, 4, 1), w, shallow), Error);
}

TEST(Forward, DeterministicAcrossWorkers) {
  const auto w = random_weights(tiny(4), 15);
  const auto cube = kcheck::random_cube(8, 8, 4, 16);
  ForwardConfig one, four;
  four.workers = 4;
  ForwardTrace trace;
  const auto a = run_forward(cube, w, one, &trace);
  const auto b = run_forward(cube, w, four);
  EXPECT_EQ(a, b);
  for (const auto& box : trace.boxes)
    for (double v : {box.cx, box.cy, box.w, box.h}) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j)
      if (a[i].class_id == a[j].class_id) {
        EXPECT_LE(iou(a[i].box, a[j].box), defaults::kNmsIou);
      }
}

namespace {

// First detections of the 8x8x4 snapshot case, recorded from a verified run.
struct GoldenDet {
  double cx, cy, w, h;
  int cls;
  double conf;
};
const std::vector<GoldenDet> kGolden{
    {7.0416937514979825, 4.7593244182782861, 0.24386899734719703, 0.48248151613935436, 1, 0.84404706472939328},
    {5.5202526531586802, 6.6421061312767282, 0.61637945288473928, 0.31865338882655764, 1, 0.84022690382492982},
    {5.5126824062466202, 6.2487666445952028, 0.65634296267820791, 0.27131280156811577, 1, 0.83621672512446288},
    {6.9643728360649373, 5.9492783258516502, 0.28468909489332844, 0.32947329407282344, 1, 0.83413816564263432},
    {5.0565467170025835, 4.4330289067649238, 1.0257264602095861, 0.31534133473863957, 1, 0.83185317467572895},
    {7.0861995845064119, 7.4353395052205418, 0.34834759970908702, 0.39538392311019466, 1, 0.8262609506317421},
};
const std::size_t kGoldenCount = 114;

}  // namespace

TEST(Forward, GoldenSnapshot) {
  const auto w = random_weights(tiny(4), 20240917);
  const auto cube = kcheck::random_cube(8, 8, 4, 42);
  const auto dets = run_forward(cube, w, ForwardConfig{});
  if (std::getenv("HYPERSPOD_PRINT_GOLDEN")) {
    std::printf("count %zu\n", dets.size());
    for (std::size_t i = 0; i < std::min<std::size_t>(dets.size(), 6); ++i)
      std::printf("{%.17g, %.17g, %.17g, %.17g, %d, %.17g},\n", dets[i].box.cx, dets[i].box.cy, dets[i].box.w,
                  dets[i].box.h, dets[i].class_id, dets[i].confidence);
  }
  ASSERT_EQ(dets.size(), kGoldenCount);
  for (std::size_t i = 0; i < kGolden.size(); ++i) {
    EXPECT_NEAR(dets[i].box.cx, kGolden[i].cx, 1e-9);
    EXPECT_NEAR(dets[i].box.cy, kGolden[i].cy, 1e-9);
    EXPECT_NEAR(dets[i].box.w, kGolden[i].w, 1e-9);
    EXPECT_NEAR(dets[i].box.h, kGolden[i].h, 1e-9);
    EXPECT_EQ(dets[i].class_id, kGolden[i].cls);
    EXPECT_NEAR(dets[i].confidence, kGolden[i].conf, 1e-9);
  }
}
