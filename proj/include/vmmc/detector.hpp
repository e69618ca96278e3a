#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmmc/box.hpp"
#include "vmmc/nn/losses.hpp"

namespace vmmc {

// One feature map of the default-box plan. Sizes are fractions of the input side.
struct AnchorLayer {
  int grid = 1;
  double step = 0.0;  // pixels between cell centres; 0 means image_size / grid
  double min_size = 0.1;
  double max_size = 0.2;  // <= 0 drops the extra sqrt(min*max) box
  std::vector<double> aspect_ratios;  // each r > 1 adds r and 1/r

  int boxes_per_cell() const;
};

struct AnchorPlan {
  int image_size = 300;
  double offset = 0.5;
  bool clip = true;
  std::vector<AnchorLayer> layers;

  // Grids 38, 19, 10, 5, 3, 1 with 4, 6, 6, 6, 4, 4 boxes per cell.
  static AnchorPlan ssd300();
  std::size_t box_count() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const AnchorPlan& p);
void from_json(const nlohmann::json& j, AnchorPlan& p);

struct AnchorSet {
  AnchorPlan plan;
  std::vector<BoundingBox> boxes;  // normalized, layer-major, then row, column, box
  std::vector<std::size_t> layer_offsets;

  std::size_t size() const { return boxes.size(); }
};

AnchorSet generate_anchors(const AnchorPlan& plan = AnchorPlan::ssd300());

struct GroundTruth {
  BoundingBox box;  // normalized
  int class_id = 0;  // foreground class, 0-based
};

// labels[a] = 0 for background, class_id + 1 for a matched anchor.
struct AnchorAssignment {
  std::vector<int> labels;
  std::vector<int> gt_index;  // -1 for background
  std::vector<double> overlap;  // best IoU with any gt

  std::size_t positives() const;
};

// Every gt first claims its best anchor (greedy bipartite by IoU), then every anchor
// with IoU >= threshold against some gt joins that gt.
AnchorAssignment match_anchors(const AnchorSet& anchors, std::span<const GroundTruth> gt,
                               double threshold = 0.5);

struct BoxEncoding {
  double center_variance = 0.1;
  double size_variance = 0.2;
};

std::array<double, 4> encode_box(const BoundingBox& target, const BoundingBox& anchor,
                                 const BoxEncoding& enc = {});
BoundingBox decode_box(std::span<const float> offsets, const BoundingBox& anchor,
                       const BoxEncoding& enc = {});

struct DetectorLossConfig {
  double match_threshold = 0.5;
  double neg_pos_ratio = 3.0;
  double loc_weight = 1.0;
  BoxEncoding encoding;

  void validate() const;
};

void to_json(nlohmann::json& j, const DetectorLossConfig& c);
void from_json(const nlohmann::json& j, DetectorLossConfig& c);

// Regression targets for the positives of an assignment (zero rows for background).
std::vector<float> loc_targets(const AnchorSet& anchors, const AnchorAssignment& assignment,
                               std::span<const GroundTruth> gt, const BoxEncoding& enc = {});

template <typename T>
struct MultiboxTerms {
  T classification = T(0);
  T localization = T(0);
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Unnormalized loss of one image. conf holds anchors x classes logits (class 0 is
// background), loc holds anchors x 4 offsets. Negatives are the background anchors
// with the highest background loss, at most neg_pos_ratio per positive. The gradient
// spans, when non-empty, receive d(terms)/d(inputs) scaled by grad_scale.
template <typename T>
MultiboxTerms<T> multibox_terms(std::span<const T> conf, std::span<const T> loc, std::size_t classes,
                                const AnchorAssignment& assignment, std::span<const float> targets,
                                const DetectorLossConfig& cfg, std::span<T> conf_grad = {},
                                std::span<T> loc_grad = {}, T grad_scale = T(1)) {
  const std::size_t anchors = assignment.labels.size();
  if (conf.size() != anchors * classes || loc.size() != anchors * 4 || targets.size() != anchors * 4) {
    throw std::invalid_argument("multibox: predictions not aligned with the anchor set");
  }
  MultiboxTerms<T> out;
  std::vector<T> background_loss;
  std::vector<std::size_t> background;
  for (std::size_t a = 0; a < anchors; ++a) {
    const int label = assignment.labels[a];
    if (label > 0) {
      ++out.positives;
      continue;
    }
    const auto row = conf.subspan(a * classes, classes);
    background_loss.push_back(nn::cross_entropy<T>(row, 0));
    background.push_back(a);
  }
  const auto budget = static_cast<std::size_t>(std::floor(cfg.neg_pos_ratio * double(out.positives)));
  out.negatives = std::min(budget, background.size());
  if (out.positives == 0 && out.negatives == 0) {
    throw std::invalid_argument("multibox: no positive or negative anchors selected");
  }
  std::vector<std::size_t> order(background.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(out.negatives), order.end(),
                    [&](std::size_t x, std::size_t y) {
                      if (background_loss[x] != background_loss[y]) return background_loss[x] > background_loss[y];
                      return background[x] < background[y];
                    });

  std::vector<T> row_grad(classes);
  const auto add_class_term = [&](std::size_t a, std::size_t label) {
    const auto row = conf.subspan(a * classes, classes);
    out.classification += nn::cross_entropy<T>(row, label, conf_grad.empty() ? std::span<T>{} : std::span<T>(row_grad));
    if (!conf_grad.empty()) {
      for (std::size_t k = 0; k < classes; ++k) conf_grad[a * classes + k] += grad_scale * row_grad[k];
    }
  };
  for (std::size_t i = 0; i < out.negatives; ++i) add_class_term(background[order[i]], 0);
  for (std::size_t a = 0; a < anchors; ++a) {
    const int label = assignment.labels[a];
    if (label <= 0) continue;
    add_class_term(a, static_cast<std::size_t>(label));
    for (std::size_t d = 0; d < 4; ++d) {
      const T r = loc[a * 4 + d] - static_cast<T>(targets[a * 4 + d]);
      out.localization += nn::smooth_l1(r);
      if (!loc_grad.empty()) loc_grad[a * 4 + d] += grad_scale * T(cfg.loc_weight) * nn::smooth_l1_grad(r);
    }
  }
  return out;
}

// Eq. 2 entry: (prob, class, x_min, y_min, x_max, y_max).
struct Detection {
  double prob = 0.0;
  int class_id = 0;
  BoundingBox bbox;
  long index = -1;  // source anchor; breaks probability ties
};

nlohmann::json to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& j);

// Greedy suppression: keep the most probable detection, drop others of the same
// class (or any class when per_class is false) whose IoU exceeds the threshold.
// Output sorted by probability, ties by smaller index.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold, bool per_class = true);

struct DecodeConfig {
  double pre_nms_floor = 0.01;
  double nms_threshold = 0.45;
  double report_floor = 0.5;
  std::size_t top_k = 200;
  BoxEncoding encoding;
};

void to_json(nlohmann::json& j, const DecodeConfig& c);
void from_json(const nlohmann::json& j, DecodeConfig& c);

// Head outputs of one image -> post-NMS detections with normalized boxes.
// conf: anchors x classes logits with background at 0; loc: anchors x 4 offsets.
std::vector<Detection> decode_detections(std::span<const float> conf, std::span<const float> loc,
                                         std::size_t classes, const AnchorSet& anchors,
                                         const DecodeConfig& cfg);

}  // namespace vmmc
