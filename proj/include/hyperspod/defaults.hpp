#pragma once

// Default values for every tunable that comes from the published benchmark
// protocol. Modules and the CLI read these constants; nothing else in the
// library repeats the literal values.

#include <array>

namespace hyperspod::defaults {

// Spectral fluctuation model.
inline constexpr double kWideAreaFactorLo = -0.3;  // b ~ U[-0.3, 0.3]
inline constexpr double kWideAreaFactorHi = 0.3;
inline constexpr double kEndmemberMaxLo = 2000.0;  // M_t ~ U[2000, 3000]
inline constexpr double kEndmemberMaxHi = 3000.0;

// Scene synthesis.
inline constexpr int kMinObjectsPerImage = 1;
inline constexpr int kMaxObjectsPerImage = 20;
inline constexpr double kSpodMixedAbundanceLo = 0.01;
inline constexpr double kAvonMixedAbundanceLo = 0.1;
inline constexpr int kPlacementRetries = 100;
inline constexpr int kBandGroup = 5;  // 150 -> 30 bands

// Dual windows (w_in, w_out) per SPOD class C1..C8, then Avon tarps.
inline constexpr std::array<std::array<int, 2>, 8> kSpodWindows{{
    {1, 3}, {1, 3}, {3, 5}, {11, 13}, {11, 13}, {13, 15}, {13, 15}, {13, 15}}};
inline constexpr std::array<int, 2> kAvonWindow{5, 7};
inline constexpr int kSpodPriorsPerClass = 20;

// Tokenization constant V.
inline constexpr double kRadianceScaleSpod = 3000.0;
inline constexpr double kRadianceScaleAvon = 5000.0;
inline constexpr double kReflectanceScale = 1.0;

// Network shape. Heads/points/FFN width follow the common deformable-DETR
// configuration; layer counts are the 6/6 setting.
inline constexpr int kEncoderLayers = 6;
inline constexpr int kDecoderLayers = 6;
inline constexpr int kHeads = 8;
inline constexpr int kPoints = 4;
inline constexpr int kFfnMultiplier = 4;
inline constexpr double kAnchorSize = 1.0;  // s, in pixels
inline constexpr int kQueryMatch = 300;
inline constexpr double kLayerNormEps = 1e-5;

// Set-prediction machinery.
inline constexpr double kDynamicIouThreshold = 0.95;
inline constexpr int kDynamicCap = 9;
inline constexpr double kCcdnCenterShift = 0.5;  // tau_1
inline constexpr double kCcdnBoxScale = 1.5;     // tau_2
inline constexpr int kCcdnPairs = 200;
inline constexpr double kCcdnMinWidth = 1e-4;
inline constexpr int kCcdnNegativeRetries = 10;
inline constexpr double kNmsIou = 0.01;
inline constexpr double kLossWeightCls = 1.0;
inline constexpr double kLossWeightL1 = 5.0;
inline constexpr double kLossWeightGiou = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;

// Evaluation.
inline constexpr int kMaxDetsPerImage = 100;
inline constexpr double kLooseIou = 0.25;
inline constexpr int kInnerBox = 5;
inline constexpr int kOuterBox = 9;
inline constexpr double kSegThresholdStep = 0.01;
inline constexpr std::array<double, 6> kSnrGridDb{10, 15, 20, 25, 30, 35};

// Detector regularization ladder: lambda = 1e-6 * trace(R) / N, x10 per retry.
inline constexpr double kRidgeScale = 1e-6;
inline constexpr int kRidgeRetries = 3;

}  // namespace hyperspod::defaults
