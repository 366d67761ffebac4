#pragma once

#include <algorithm>

namespace hyperspod {

/// Axis-aligned box in center form. In pixel units the pixel at column i,
/// row j covers [i, i+1) x [j, j+1), so its center is (i + 0.5, j + 0.5).
/// The same type carries normalized boxes (all components in (0, 1)).
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  bool valid() const { return w > 0.0 && h > 0.0; }

  static BBox from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  /// Tight box around the pixel range [col0, col1] x [row0, row1] (inclusive).
  static BBox from_pixel_range(int col0, int row0, int col1, int row1) {
    return from_corners(col0, row0, col1 + 1.0, row1 + 1.0);
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Positive-area overlap.
inline bool intersects(const BBox& a, const BBox& b) { return intersection_area(a, b) > 0.0; }

/// `inner` lies entirely within `outer` (boundaries may touch).
inline bool contains(const BBox& outer, const BBox& inner) {
  return inner.x0() >= outer.x0() && inner.y0() >= outer.y0() && inner.x1() <= outer.x1() &&
         inner.y1() <= outer.y1();
}

inline BBox normalize(const BBox& b, int width, int height) {
  return {b.cx / width, b.cy / height, b.w / width, b.h / height};
}

inline BBox denormalize(const BBox& b, int width, int height) {
  return {b.cx * width, b.cy * height, b.w * width, b.h * height};
}

}  // namespace hyperspod
