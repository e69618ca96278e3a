#pragma once

#include <string>

namespace vmmc {

// Axis-aligned box. Pixel boxes use image coordinates; normalized boxes are
// fractions of the image side in [0, 1].
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  bool normalized = false;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  bool operator==(const BoundingBox&) const = default;
};

// Intersection over union. Throws when the boxes use different conventions.
double iou(const BoundingBox& a, const BoundingBox& b);

BoundingBox clip_unit(const BoundingBox& b);

std::string to_string(const BoundingBox& b);

}  // namespace vmmc
