#include "vmmc/detector.hpp"

#include <map>

namespace vmmc {
using nlohmann::json;

int AnchorLayer::boxes_per_cell() const {
  return 1 + (max_size > 0.0 ? 1 : 0) + 2 * static_cast<int>(aspect_ratios.size());
}

AnchorPlan AnchorPlan::ssd300() {
  AnchorPlan p;
  const int grids[] = {38, 19, 10, 5, 3, 1};
  const double steps[] = {8, 16, 32, 64, 100, 300};
  const double mins[] = {30, 60, 111, 162, 213, 264};
  const double maxs[] = {60, 111, 162, 213, 264, 315};
  for (int i = 0; i < 6; ++i) {
    AnchorLayer l;
    l.grid = grids[i];
    l.step = steps[i];
    l.min_size = mins[i] / 300.0;
    l.max_size = maxs[i] / 300.0;
    l.aspect_ratios = (i == 0 || i >= 4) ? std::vector<double>{2.0} : std::vector<double>{2.0, 3.0};
    p.layers.push_back(l);
  }
  return p;
}

std::size_t AnchorPlan::box_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.grid) * l.grid * l.boxes_per_cell();
  return n;
}

void AnchorPlan::validate() const {
  if (image_size <= 0) throw std::invalid_argument("anchor plan: image_size must be positive");
  if (layers.empty()) throw std::invalid_argument("anchor plan: no layers");
  for (const auto& l : layers) {
    if (l.grid <= 0 || l.min_size <= 0.0 || l.step < 0.0) throw std::invalid_argument("anchor plan: bad layer");
    for (double r : l.aspect_ratios) {
      if (!(r > 1.0)) throw std::invalid_argument("anchor plan: aspect ratios must exceed 1");
    }
  }
}

void to_json(json& j, const AnchorPlan& p) {
  json layers = json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"grid", l.grid}, {"step", l.step}, {"min_size", l.min_size},
                      {"max_size", l.max_size}, {"aspect_ratios", l.aspect_ratios}});
  }
  j = {{"image_size", p.image_size}, {"offset", p.offset}, {"clip", p.clip}, {"layers", layers}};
}

void from_json(const json& j, AnchorPlan& p) {
  p.image_size = j.at("image_size");
  p.offset = j.at("offset");
  p.clip = j.at("clip");
  p.layers.clear();
  for (const auto& l : j.at("layers")) {
    p.layers.push_back({l.at("grid"), l.at("step"), l.at("min_size"), l.at("max_size"),
                        l.at("aspect_ratios").get<std::vector<double>>()});
  }
}

AnchorSet generate_anchors(const AnchorPlan& plan) {
  plan.validate();
  AnchorSet set;
  set.plan = plan;
  set.boxes.reserve(plan.box_count());
  const auto push = [&](double cx, double cy, double w, double h) {
    BoundingBox b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, true};
    set.boxes.push_back(plan.clip ? clip_unit(b) : b);
  };
  for (const auto& l : plan.layers) {
    set.layer_offsets.push_back(set.boxes.size());
    const double step = (l.step > 0.0 ? l.step : double(plan.image_size) / l.grid) / plan.image_size;
    for (int y = 0; y < l.grid; ++y) {
      for (int x = 0; x < l.grid; ++x) {
        const double cx = (x + plan.offset) * step;
        const double cy = (y + plan.offset) * step;
        push(cx, cy, l.min_size, l.min_size);
        if (l.max_size > 0.0) {
          const double s = std::sqrt(l.min_size * l.max_size);
          push(cx, cy, s, s);
        }
        for (double r : l.aspect_ratios) {
          const double q = std::sqrt(r);
          push(cx, cy, l.min_size * q, l.min_size / q);
          push(cx, cy, l.min_size / q, l.min_size * q);
        }
      }
    }
  }
  return set;
}

std::size_t AnchorAssignment::positives() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int l) { return l > 0; }));
}

AnchorAssignment match_anchors(const AnchorSet& anchors, std::span<const GroundTruth> gt, double threshold) {
  if (anchors.size() == 0) throw std::invalid_argument("match_anchors: empty anchor set");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("match_anchors: threshold must be in (0,1)");
  const std::size_t n = anchors.size();
  AnchorAssignment out;
  out.labels.assign(n, 0);
  out.gt_index.assign(n, -1);
  out.overlap.assign(n, 0.0);
  if (gt.empty()) return out;

  std::vector<double> overlaps(gt.size() * n);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (!gt[g].box.normalized) throw std::invalid_argument("match_anchors: ground truth must be normalized");
    for (std::size_t a = 0; a < n; ++a) {
      const double v = iou(gt[g].box, anchors.boxes[a]);
      overlaps[g * n + a] = v;
      if (v > out.overlap[a]) {
        out.overlap[a] = v;
        out.gt_index[a] = static_cast<int>(g);
      }
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (out.overlap[a] >= threshold) {
      out.labels[a] = gt[out.gt_index[a]].class_id + 1;
    } else {
      out.gt_index[a] = -1;
    }
  }

  std::vector<bool> gt_done(gt.size(), false);
  std::vector<bool> anchor_taken(n, false);
  for (std::size_t round = 0; round < std::min(gt.size(), n); ++round) {
    double best = -1.0;
    std::size_t bg = 0, ba = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt_done[g]) continue;
      for (std::size_t a = 0; a < n; ++a) {
        if (!anchor_taken[a] && overlaps[g * n + a] > best) {
          best = overlaps[g * n + a];
          bg = g;
          ba = a;
        }
      }
    }
    gt_done[bg] = true;
    anchor_taken[ba] = true;
    out.gt_index[ba] = static_cast<int>(bg);
    out.labels[ba] = gt[bg].class_id + 1;
    out.overlap[ba] = best;
  }
  return out;
}

std::array<double, 4> encode_box(const BoundingBox& t, const BoundingBox& a, const BoxEncoding& enc) {
  const double aw = a.width(), ah = a.height();
  if (!(aw > 0.0 && ah > 0.0 && t.valid())) throw std::invalid_argument("encode_box: degenerate box");
  const double acx = (a.x_min + a.x_max) / 2, acy = (a.y_min + a.y_max) / 2;
  const double tcx = (t.x_min + t.x_max) / 2, tcy = (t.y_min + t.y_max) / 2;
  return {(tcx - acx) / aw / enc.center_variance, (tcy - acy) / ah / enc.center_variance,
          std::log(t.width() / aw) / enc.size_variance, std::log(t.height() / ah) / enc.size_variance};
}

BoundingBox decode_box(std::span<const float> o, const BoundingBox& a, const BoxEncoding& enc) {
  if (o.size() != 4) throw std::invalid_argument("decode_box: expected 4 offsets");
  const double aw = a.width(), ah = a.height();
  const double cx = (a.x_min + a.x_max) / 2 + o[0] * enc.center_variance * aw;
  const double cy = (a.y_min + a.y_max) / 2 + o[1] * enc.center_variance * ah;
  const double w = aw * std::exp(std::min(o[2] * enc.size_variance, 10.0));
  const double h = ah * std::exp(std::min(o[3] * enc.size_variance, 10.0));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, a.normalized};
}

void DetectorLossConfig::validate() const {
  if (!(match_threshold > 0.0 && match_threshold < 1.0)) {
    throw std::invalid_argument("match threshold must be in (0,1)");
  }
  if (!(neg_pos_ratio >= 1.0)) throw std::invalid_argument("negative mining ratio must be >= 1");
  if (!(loc_weight >= 0.0)) throw std::invalid_argument("loc weight must be non-negative");
}

void to_json(json& j, const DetectorLossConfig& c) {
  j = {{"localization", "smooth_l1"},
       {"classification", "softmax_cross_entropy"},
       {"match_threshold", c.match_threshold},
       {"neg_pos_ratio", c.neg_pos_ratio},
       {"loc_weight", c.loc_weight},
       {"variances", {c.encoding.center_variance, c.encoding.size_variance}}};
}

void from_json(const json& j, DetectorLossConfig& c) {
  c.match_threshold = j.value("match_threshold", 0.5);
  c.neg_pos_ratio = j.value("neg_pos_ratio", 3.0);
  c.loc_weight = j.value("loc_weight", 1.0);
  const auto v = j.value("variances", std::vector<double>{0.1, 0.2});
  c.encoding = {v.at(0), v.at(1)};
}

std::vector<float> loc_targets(const AnchorSet& anchors, const AnchorAssignment& assignment,
                               std::span<const GroundTruth> gt, const BoxEncoding& enc) {
  std::vector<float> out(anchors.size() * 4, 0.0f);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (assignment.labels[a] <= 0) continue;
    const auto t = encode_box(gt[assignment.gt_index[a]].box, anchors.boxes[a], enc);
    for (int d = 0; d < 4; ++d) out[a * 4 + d] = static_cast<float>(t[d]);
  }
  return out;
}

json to_json(const Detection& d) {
  return {{"prob", d.prob}, {"class", d.class_id}, {"bbox", {d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max}}};
}

Detection detection_from_json(const json& j) {
  Detection d;
  d.prob = j.at("prob");
  d.class_id = j.at("class");
  const auto b = j.at("bbox").get<std::vector<double>>();
  if (b.size() != 4) throw std::invalid_argument("detection bbox must have 4 coordinates");
  d.bbox = {b[0], b[1], b[2], b[3], j.value("normalized", true)};
  if (!(d.prob >= 0.0 && d.prob <= 1.0)) throw std::invalid_argument("detection prob outside [0,1]");
  return d;
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.prob != b.prob) return a.prob > b.prob;
  return a.index < b.index;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold, bool per_class) {
  std::stable_sort(detections.begin(), detections.end(), ranks_before);
  std::map<int, std::vector<const Detection*>> kept_by_class;
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    auto& bucket = kept_by_class[per_class ? d.class_id : 0];
    const bool suppressed = std::any_of(bucket.begin(), bucket.end(),
                                        [&](const Detection* k) { return iou(k->bbox, d.bbox) > iou_threshold; });
    if (!suppressed) bucket.push_back(&d);
  }
  for (const auto& [cls, bucket] : kept_by_class) {
    for (const Detection* d : bucket) kept.push_back(*d);
  }
  std::stable_sort(kept.begin(), kept.end(), ranks_before);
  return kept;
}

void to_json(json& j, const DecodeConfig& c) {
  j = {{"pre_nms_floor", c.pre_nms_floor},
       {"nms_threshold", c.nms_threshold},
       {"report_floor", c.report_floor},
       {"top_k", c.top_k}};
}

void from_json(const json& j, DecodeConfig& c) {
  c.pre_nms_floor = j.value("pre_nms_floor", 0.01);
  c.nms_threshold = j.value("nms_threshold", 0.45);
  c.report_floor = j.value("report_floor", 0.5);
  c.top_k = j.value("top_k", std::size_t{200});
}

std::vector<Detection> decode_detections(std::span<const float> conf, std::span<const float> loc,
                                         std::size_t classes, const AnchorSet& anchors, const DecodeConfig& cfg) {
  const std::size_t n = anchors.size();
  if (classes < 2 || conf.size() != n * classes || loc.size() != n * 4) {
    throw std::invalid_argument("decode_detections: head outputs not aligned with the anchor set");
  }
  std::vector<Detection> candidates;
  std::vector<double> logits(classes), probs(classes);
  for (std::size_t a = 0; a < n; ++a) {
    std::copy(conf.begin() + a * classes, conf.begin() + (a + 1) * classes, logits.begin());
    nn::softmax<double>(logits, probs);
    BoundingBox box;
    bool decoded = false;
    for (std::size_t k = 1; k < classes; ++k) {
      if (probs[k] < cfg.pre_nms_floor) continue;
      if (!decoded) {
        box = clip_unit(decode_box(loc.subspan(a * 4, 4), anchors.boxes[a], cfg.encoding));
        decoded = true;
      }
      if (!box.valid()) break;
      candidates.push_back({probs[k], static_cast<int>(k - 1), box, static_cast<long>(a)});
    }
  }
  auto kept = nms(std::move(candidates), cfg.nms_threshold, true);
  std::erase_if(kept, [&](const Detection& d) { return d.prob < cfg.report_floor; });
  if (kept.size() > cfg.top_k) kept.resize(cfg.top_k);
  return kept;
}

}  // namespace vmmc
