#pragma once

#include <algorithm>
#include <cstddef>
#include <tuple>

namespace msda {

/// Axis-aligned box in pixel coordinates, (x_min, y_min) inclusive corner.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
  friend bool operator<(const Box& a, const Box& b) {
    return std::tie(a.x_min, a.y_min, a.x_max, a.y_max) <
           std::tie(b.x_min, b.y_min, b.x_max, b.y_max);
  }
};

struct GroundTruthBox {
  int class_id = 0;
  Box box;

  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

struct Detection {
  int class_id = 0;
  Box box;
  double score = 0.0;
  std::size_t image_id = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Intersection over union; 0 for disjoint boxes.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace msda
