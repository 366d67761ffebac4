#include <gtest/gtest.h>

#include "support.hpp"

using namespace hyperspod;

namespace {

Mat random_spd(Eigen::Index n, Rng& rng) {
  Mat a(n, n + 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  return a * a.transpose() / static_cast<double>(n) + 0.1 * Mat::Identity(n, n);
}

Vec random_vec(Eigen::Index n, Rng& rng) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(0.1, 1.0);
  return v;
}

// 1x3 cube: with window (1,3) the centre pixel sees exactly the two outer pixels.
HyperCube strip(const std::array<std::array<float, 2>, 3>& px) {
  HyperCube c = HyperCube::filled(1, 3, 2, 0.0f);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t b = 0; b < 2; ++b) c.at(0, j, b) = px[j][b];
  return c;
}

}  // namespace

TEST(Cem, UnitGainOnRandomCorrelations) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(t % 30);
    const Mat r = random_spd(n, rng);
    const Vec d = random_vec(n, rng);
    const Vec w = cem_filter(regularized_factor(r, static_cast<std::size_t>(n)), d);
    EXPECT_NEAR(w.dot(d), 1.0, 1e-8);
  }
}

TEST(Cem, IdentityCorrelationScoresTargetOne) {
  Rng rng(2);
  const Vec d = random_vec(5, rng);
  const Vec w = cem_filter(regularized_factor(Mat::Identity(5, 5), 5), d);
  EXPECT_NEAR(w.dot(d), 1.0, 1e-12);
  EXPECT_NEAR((w - d / d.squaredNorm()).norm(), 0.0, 1e-12);
}

TEST(Cem, TwoBandHandInverse) {
  const auto cube = strip({{{2.0f, 1.0f}, {5.0f, 7.0f}, {1.0f, 3.0f}}});
  const std::vector<double> d{1.0, 2.0};
  // R = (b1 b1^T + b2 b2^T) / 2 with b1 = (2,1), b2 = (1,3)
  const double r11 = (4 + 1) / 2.0, r12 = (2 + 3) / 2.0, r22 = (1 + 9) / 2.0;
  const double det = r11 * r22 - r12 * r12;
  const double i11 = r22 / det, i12 = -r12 / det, i22 = r11 / det;
  const double rd0 = i11 * d[0] + i12 * d[1], rd1 = i12 * d[0] + i22 * d[1];
  const double denom = d[0] * rd0 + d[1] * rd1;
  const double expect = (rd0 * 5.0 + rd1 * 7.0) / denom;
  const auto map = cem(cube, d, {1, 3});
  EXPECT_NEAR(map.scores[1], expect, 1e-4 * std::abs(expect));
}

TEST(Smf, TargetScoresOne) {
  Rng rng(3);
  auto cube = testing_support::random_cube(7, 7, 4, 3);
  const std::vector<double> d{900.0, 200.0, 650.0, 300.0};
  cube.set_pixel(3, 3, d);
  const auto map = smf(cube, d, {1, 5});
  EXPECT_NEAR(map.scores[3 * 7 + 3], 1.0, 1e-5);
}

TEST(Asd, ScoreIsSquaredCosineInWhitenedSpace) {
  auto cube = testing_support::random_cube(7, 7, 3, 4);
  const std::vector<double> d{900.0, 200.0, 650.0};
  const auto map = asd(cube, d, {1, 5});
  for (float v : map.scores) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f + 1e-6f);
  }
  // A pixel equal to mean + k (d - mean) is perfectly aligned.
  const auto idx = detail::annulus(7, 7, 3, 3, {1, 5});
  const auto st = detail::local_stats(detail::pixel_matrix(cube), idx, true);
  std::vector<double> x(3);
  for (int b = 0; b < 3; ++b) x[static_cast<std::size_t>(b)] = st.mean[b] + 0.5 * (d[static_cast<std::size_t>(b)] - st.mean[b]);
  cube.set_pixel(3, 3, x);
  EXPECT_NEAR(asd(cube, d, {1, 5}).scores[3 * 7 + 3], 1.0, 1e-5);
}

TEST(Osp, ProjectorIsIdempotentAndAnnihilatesU) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index n = 4 + t % 12, k = 1 + t % 3;
    Mat u(n, k);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = rng.normal();
    const Mat p = osp_projector(u);
    EXPECT_LE((p * p - p).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((p * u).cwiseAbs().maxCoeff(), 1e-8);
  }
  EXPECT_EQ(osp_projector(Mat(3, 0)), Mat::Identity(3, 3));
}

TEST(Osp, NoUndesiredGivesDotProduct) {
  auto cube = testing_support::random_cube(3, 3, 3, 6);
  const std::vector<double> d{1.0, -2.0, 0.5};
  const auto map = osp(cube, d, {});
  for (std::size_t p = 0; p < 9; ++p) {
    const double expect = cube.at(p / 3, p % 3, 0) - 2.0 * cube.at(p / 3, p % 3, 1) + 0.5 * cube.at(p / 3, p % 3, 2);
    EXPECT_NEAR(map.scores[p], expect, 1e-3);
  }
}

TEST(Tcimf, MeetsTargetAndNullConstraints) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 8;
    const Mat r = random_spd(n, rng);
    Mat dmat(n, 2), umat(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      dmat(i, 0) = rng.uniform(0.1, 1.0);
      dmat(i, 1) = rng.uniform(0.1, 1.0);
      umat(i, 0) = rng.uniform(0.1, 1.0);
      umat(i, 1) = rng.uniform(0.1, 1.0);
    }
    const Vec w = tcimf_filter(regularized_factor(r, 8), dmat, umat);
    EXPECT_NEAR(w.dot(dmat.col(0)), 1.0, 1e-8);
    EXPECT_NEAR(w.dot(dmat.col(1)), 1.0, 1e-8);
    EXPECT_NEAR(w.dot(umat.col(0)), 0.0, 1e-8);
    EXPECT_NEAR(w.dot(umat.col(1)), 0.0, 1e-8);
  }
}

TEST(Regularization, LadderIsDeterministic) {
  // Rank-one matrix estimated from fewer samples than bands.
  Vec v(4);
  v << 1, 2, 3, 4;
  const Mat m = v * v.transpose();
  const auto f = regularized_factor(m, 1);
  EXPECT_DOUBLE_EQ(f.lambda, defaults::kRidgeScale * m.trace() / 4.0);
  EXPECT_EQ(f.attempts, 1);
  // Enough samples: no ridge, but a singular matrix climbs the ladder.
  const auto g = regularized_factor(m, 10);
  EXPECT_GE(g.attempts, 2);
  EXPECT_GT(g.lambda, 0.0);
  try {
    regularized_factor(Mat::Zero(3, 3), 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::singular_correlation);
  }
}

TEST(DualWindow, Validation) {
  EXPECT_NO_THROW((DualWindow{1, 3}.validate()));
  EXPECT_THROW((DualWindow{3, 3}.validate()), Error);
  EXPECT_THROW((DualWindow{2, 5}.validate()), Error);
  EXPECT_THROW((DualWindow{0, 3}.validate()), Error);
  const auto spod = WindowTable::spod();
  EXPECT_EQ(spod.for_class(1).w_in, 1);
  EXPECT_EQ(spod.for_class(1).w_out, 3);
  EXPECT_EQ(spod.for_class(8).w_in, 13);
  EXPECT_EQ(spod.for_class(8).w_out, 15);
  // annulus clipped at the corner of a 20x20 image: 8x8 box minus 2x2 core
  EXPECT_EQ(detail::annulus(20, 20, 0, 0, {3, 15}).size(), 8u * 8u - 2u * 2u);
}

TEST(DetectAll, MaxReductionAndCardinality) {
  const auto cube = testing_support::random_cube(9, 9, 5, 8);
  Rng rng(8);
  PriorSpectra priors;
  std::vector<std::vector<double>> own;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> s(5);
    for (double& v : s) v = rng.uniform(100.0, 1000.0);
    own.push_back(s);
    priors.add(2, s);
  }
  WindowTable wt;
  wt.fallback = {1, 5};
  const auto maps = detect_all(cube, priors, HtdMethod::cem, wt);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0].class_id, 2);
  for (std::size_t p = 0; p < 81; ++p) {
    float m = -std::numeric_limits<float>::infinity();
    for (const auto& s : own) m = std::max(m, cem(cube, s, {1, 5}).scores[p]);
    EXPECT_EQ(maps[0].scores[p], m);
  }
  priors.add(5, own[0]);
  EXPECT_EQ(detect_all(cube, priors, HtdMethod::osp, wt).size(), 2u);
}

TEST(DetectAll, ParallelEqualsSequential) {
  const auto cube = testing_support::random_cube(17, 13, 6, 9);
  PriorSpectra priors;
  priors.add(1, {500, 600, 700, 800, 900, 100});
  priors.add(2, {100, 900, 100, 900, 100, 900});
  for (auto method : {HtdMethod::cem, HtdMethod::smf, HtdMethod::osp, HtdMethod::asd, HtdMethod::tcimf}) {
    HtdOptions seq, par;
    par.workers = 4;
    const auto a = detect_all(cube, priors, method, WindowTable{}, seq);
    const auto b = detect_all(cube, priors, method, WindowTable{}, par);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i], b[i]) << to_string(method);
      for (float v : a[i].scores) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Cem, EasySceneAuc) {
  Rng rng(10);
  BackgroundParams bp;
  const auto bg = synth_background(32, 32, 16, 3, rng, bp);
  std::vector<double> target(16);
  for (std::size_t b = 0; b < 16; ++b) target[b] = 2500.0 * (b % 2 ? 0.3 : 1.0);
  ObjectTemplate t{1, {{0, 0}, {1, 0}, {0, 1}, {1, 1}}, {{1.0}, {1.0}, {1.0}, {1.0}}};
  const auto [cube, ann] = inject(bg, t, {target}, 14, 9);
  BinaryMask gt = BinaryMask::empty(32, 32, 1);
  rasterize_template(gt, t, 14, 9);
  const auto map = cem(cube, target, {3, 7}, {}, 1);
  EXPECT_GE(roc_auc(map, gt), 0.99);
}

TEST(Detectors, BandMismatchIsReported) {
  const auto cube = testing_support::random_cube(4, 4, 3, 11);
  try {
    cem(cube, std::vector<double>{1.0, 2.0}, {1, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::length_mismatch);
  }
  EXPECT_THROW(parse_htd_method("rx"), Error);
}
