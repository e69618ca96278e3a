#include "vmmc/box.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace vmmc {

double iou(const BoundingBox& a, const BoundingBox& b) {
  if (a.normalized != b.normalized) {
    throw std::invalid_argument("iou: mixed pixel and normalized boxes");
  }
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoundingBox clip_unit(const BoundingBox& b) {
  BoundingBox c = b;
  c.x_min = std::clamp(b.x_min, 0.0, 1.0);
  c.y_min = std::clamp(b.y_min, 0.0, 1.0);
  c.x_max = std::clamp(b.x_max, 0.0, 1.0);
  c.y_max = std::clamp(b.y_max, 0.0, 1.0);
  return c;
}

std::string to_string(const BoundingBox& b) {
  std::ostringstream os;
  os << "[" << b.x_min << "," << b.y_min << "," << b.x_max << "," << b.y_max << "]"
     << (b.normalized ? "n" : "px");
  return os.str();
}

}  // namespace vmmc
