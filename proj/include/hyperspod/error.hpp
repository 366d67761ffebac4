#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hyperspod {

enum class Errc {
  invalid_argument,
  malformed_header,
  size_mismatch,
  non_finite_sample,
  io_failure,
  indivisible_band_count,
  degenerate_band,
  length_mismatch,
  zero_reflectance_divisor,
  empty_template,
  out_of_bounds,
  overlap_rejected,
  k_out_of_range,
  empty_gt,
  singular_correlation,
  shape_mismatch,
  infeasible,
  no_gt_for_class,
  degenerate_gt,
  zero_variance_band,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::malformed_header: return "MalformedHeader";
    case Errc::size_mismatch: return "SizeMismatch";
    case Errc::non_finite_sample: return "NonFiniteSample";
    case Errc::io_failure: return "IoFailure";
    case Errc::indivisible_band_count: return "IndivisibleBandCount";
    case Errc::degenerate_band: return "DegenerateBand";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::zero_reflectance_divisor: return "ZeroReflectanceDivisor";
    case Errc::empty_template: return "EmptyTemplate";
    case Errc::out_of_bounds: return "OutOfBounds";
    case Errc::overlap_rejected: return "OverlapRejected";
    case Errc::k_out_of_range: return "KOutOfRange";
    case Errc::empty_gt: return "EmptyGt";
    case Errc::singular_correlation: return "SingularCorrelation";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::infeasible: return "Infeasible";
    case Errc::no_gt_for_class: return "NoGtForClass";
    case Errc::degenerate_gt: return "DegenerateGt";
    case Errc::zero_variance_band: return "ZeroVarianceBand";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace hyperspod
