#pragma once

#include <cstdint>
#include <filesystem>

#include <opencv2/core.hpp>

#include "vmmc/box.hpp"
#include "vmmc/dataset.hpp"

namespace vmmc {

// Desk-scale stand-in for the marketplace corpus: one saturated vehicle silhouette
// per frame on a cluttered, desaturated background. Each class has its own body
// outline and hue band.
struct SyntheticConfig {
  int images_per_class = 100;
  int width = 200;
  int height = 150;
  double min_vehicle_width = 0.35;  // fraction of the frame width
  double max_vehicle_width = 0.65;
  int clutter_shapes = 14;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticImage {
  cv::Mat image;  // 8-bit BGR
  int class_id = 0;
  BoundingBox bbox;  // pixels
};

SyntheticImage render_vehicle(int class_id, std::uint64_t seed, const SyntheticConfig& cfg);

// Writes <dir>/<slug>/<slug>_NNNN.png plus <dir>/manifest.csv with human-sourced boxes.
DatasetManifest write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticConfig& cfg);

}  // namespace vmmc
