#include <gtest/gtest.h>

#include "hyperspod/defaults.hpp"

using namespace hyperspod::defaults;

// Values transcribed independently from the published protocol.

TEST(Defaults, FluctuationModel) {
  EXPECT_EQ(kWideAreaFactorLo, -0.3);
  EXPECT_EQ(kWideAreaFactorHi, 0.3);
  EXPECT_EQ(kEndmemberMaxLo, 2000.0);
  EXPECT_EQ(kEndmemberMaxHi, 3000.0);
}

TEST(Defaults, SceneSynthesis) {
  EXPECT_EQ(kMinObjectsPerImage, 1);
  EXPECT_EQ(kMaxObjectsPerImage, 20);
  EXPECT_EQ(kSpodMixedAbundanceLo, 0.01);
  EXPECT_EQ(kAvonMixedAbundanceLo, 0.1);
}

TEST(Defaults, DualWindows) {
  const std::array<int, 8> in{1, 1, 3, 11, 11, 13, 13, 13}, out{3, 3, 5, 13, 13, 15, 15, 15};
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(kSpodWindows[c][0], in[c]) << "C" << c + 1;
    EXPECT_EQ(kSpodWindows[c][1], out[c]) << "C" << c + 1;
  }
  EXPECT_EQ(kAvonWindow[0], 5);
  EXPECT_EQ(kAvonWindow[1], 7);
}

TEST(Defaults, TokenScale) {
  EXPECT_EQ(kRadianceScaleSpod, 3000.0);
  EXPECT_EQ(kRadianceScaleAvon, 5000.0);
}

TEST(Defaults, AssignmentAndDenoising) {
  EXPECT_EQ(kDynamicIouThreshold, 0.95);
  EXPECT_EQ(kDynamicCap, 9);
  EXPECT_EQ(kCcdnCenterShift, 0.5);
  EXPECT_EQ(kCcdnBoxScale, 1.5);
  EXPECT_EQ(kCcdnPairs, 200);
  EXPECT_EQ(kNmsIou, 0.01);
}

TEST(Defaults, Evaluation) {
  EXPECT_EQ(kLooseIou, 0.25);
  EXPECT_EQ(kInnerBox, 5);
  EXPECT_EQ(kOuterBox, 9);
  EXPECT_EQ(kSegThresholdStep, 0.01);
  EXPECT_EQ(kSnrGridDb, (std::array<double, 6>{10, 15, 20, 25, 30, 35}));
}
