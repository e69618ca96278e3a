#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "vmmc/detector.hpp"
#include "vmmc/nn/state.hpp"
#include "vmmc/ssd.hpp"
#include "vmmc/synthetic.hpp"

using namespace vmmc;
namespace fs = std::filesystem;

namespace {

BoundingBox nb(double x0, double y0, double x1, double y1) { return {x0, y0, x1, y1, true}; }

AnchorSet fixed_anchors(std::vector<BoundingBox> boxes) {
  AnchorSet s;
  s.boxes = std::move(boxes);
  s.layer_offsets = {0};
  return s;
}

std::vector<DetectorSample> tiny_samples(int count, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  std::vector<DetectorSample> out;
  for (int i = 0; i < count; ++i) {
    const SyntheticImage s = render_vehicle(i % kNumClasses, mix_seed(seed, i), cfg);
    out.push_back({preprocess(s.image, 300), {{to_square_normalized(s.bbox, s.image.cols, s.image.rows), 0}}});
  }
  return out;
}

}  // namespace

TEST(Iou, HandValuesAndProperties) {
  EXPECT_DOUBLE_EQ(iou(BoundingBox{0, 0, 2, 2}, BoundingBox{0, 0, 2, 2}), 1.0);
  EXPECT_DOUBLE_EQ(iou(BoundingBox{0, 0, 1, 1}, BoundingBox{2, 2, 3, 3}), 0.0);
  EXPECT_NEAR(iou(BoundingBox{0, 0, 2, 2}, BoundingBox{1, 0, 3, 2}), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(iou(BoundingBox{0, 0, 1, 1}, nb(0, 0, 1, 1)), std::invalid_argument);
  std::mt19937_64 rng(1);
  const auto dets = oracle::random_detections(rng, 200, 1);
  for (std::size_t i = 0; i + 1 < dets.size(); ++i) {
    const double v = iou(dets[i].bbox, dets[i + 1].bbox);
    EXPECT_DOUBLE_EQ(v, iou(dets[i + 1].bbox, dets[i].bbox));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, oracle::overlap(dets[i].bbox, dets[i + 1].bbox), 1e-12);
    EXPECT_DOUBLE_EQ(iou(dets[i].bbox, dets[i].bbox), 1.0);
  }
}

TEST(Anchors, StandardPlanHas8732Boxes) {
  const AnchorSet a = generate_anchors();
  EXPECT_EQ(a.size(), 38u * 38 * 4 + 19u * 19 * 6 + 10u * 10 * 6 + 5u * 5 * 6 + 3u * 3 * 4 + 1u * 4);
  EXPECT_EQ(a.size(), 8732u);
  const int per_cell[] = {4, 6, 6, 6, 4, 4};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(a.plan.layers[i].boxes_per_cell(), per_cell[i]);
  EXPECT_EQ(a.layer_offsets[1], 38u * 38 * 4);
  for (const auto& b : a.boxes) {
    EXPECT_TRUE(b.valid());
    EXPECT_GE(b.x_min, 0.0);
    EXPECT_LE(b.x_max, 1.0);
    EXPECT_GE(b.y_min, 0.0);
    EXPECT_LE(b.y_max, 1.0);
  }
}

TEST(Anchors, SingleCellLayer) {
  AnchorPlan p;
  p.layers = {{1, 0.0, 0.2, 0.4, {2.0}}};
  const AnchorSet a = generate_anchors(p);
  ASSERT_EQ(a.size(), 4u);
  // min square, sqrt(min*max) square, then 2:1 and 1:2 around the image centre.
  EXPECT_NEAR(a.boxes[0].width(), 0.2, 1e-12);
  EXPECT_NEAR(a.boxes[1].width(), std::sqrt(0.08), 1e-12);
  EXPECT_NEAR(a.boxes[2].width() / a.boxes[2].height(), 2.0, 1e-12);
  EXPECT_NEAR(a.boxes[3].height() / a.boxes[3].width(), 2.0, 1e-12);
  for (const auto& b : a.boxes) EXPECT_NEAR((b.x_min + b.x_max) / 2, 0.5, 1e-12);
}

TEST(Matching, ExactAnchorAndForcedMatch) {
  const AnchorSet anchors = generate_anchors();
  const std::vector<GroundTruth> exact{{anchors.boxes[1234], 2}};
  const AnchorAssignment m = match_anchors(anchors, exact);
  EXPECT_EQ(m.labels[1234], 3);
  EXPECT_DOUBLE_EQ(m.overlap[1234], 1.0);

  // Ten anchors whose best overlap with the gt is 0.3.
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < 10; ++i) boxes.push_back(nb(0.05 * i, 0.5, 0.05 * i + 0.1, 0.6));
  const AnchorSet ten = fixed_anchors(boxes);
  const GroundTruth gt{nb(0.0, 0.5, 0.1, 0.6 + 0.1 * (1.0 / 0.3 - 1.0)), 0};
  std::size_t best = 0;
  double best_v = -1.0;
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    const double v = oracle::overlap(gt.box, boxes[a]);
    if (v > best_v) {
      best_v = v;
      best = a;
    }
  }
  ASSERT_NEAR(best_v, 0.3, 1e-9);
  const AnchorAssignment forced = match_anchors(ten, std::vector<GroundTruth>{gt}, 0.5);
  EXPECT_EQ(forced.positives(), 1u);
  EXPECT_EQ(forced.labels[best], 1);
}

TEST(Matching, NoGroundTruthAndErrors) {
  const AnchorSet anchors = generate_anchors();
  const AnchorAssignment m = match_anchors(anchors, std::vector<GroundTruth>{});
  EXPECT_EQ(m.positives(), 0u);
  EXPECT_THROW(match_anchors(AnchorSet{}, std::vector<GroundTruth>{}), std::invalid_argument);
  EXPECT_THROW(match_anchors(anchors, std::vector<GroundTruth>{{BoundingBox{0, 0, 5, 5}, 0}}), std::invalid_argument);
}

TEST(Matching, EveryGroundTruthGetsAPositive) {
  const AnchorSet anchors = generate_anchors();
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto dets = oracle::random_detections(rng, 1 + trial % 5, 7);
    std::vector<GroundTruth> gt;
    for (const auto& d : dets) gt.push_back({d.bbox, d.class_id});
    const AnchorAssignment m = match_anchors(anchors, gt);
    std::vector<int> hits(gt.size(), 0);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (m.labels[a] > 0) {
        ASSERT_GE(m.gt_index[a], 0);
        EXPECT_EQ(m.labels[a], gt[m.gt_index[a]].class_id + 1);
        ++hits[m.gt_index[a]];
      }
    }
    for (int h : hits) EXPECT_GE(h, 1);
  }
}

TEST(Encoding, DecodeInvertsEncode) {
  const BoundingBox anchor = nb(0.2, 0.3, 0.5, 0.45);
  const BoundingBox target = nb(0.25, 0.28, 0.61, 0.5);
  const auto o = encode_box(target, anchor);
  const std::vector<float> f(o.begin(), o.end());
  const BoundingBox back = decode_box(f, anchor);
  EXPECT_NEAR(back.x_min, target.x_min, 1e-6);
  EXPECT_NEAR(back.y_max, target.y_max, 1e-6);
  const auto zero = encode_box(anchor, anchor);
  for (double v : zero) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(SmoothL1, PiecewiseValuesAndContinuity) {
  EXPECT_DOUBLE_EQ(nn::smooth_l1(0.0), 0.0);
  EXPECT_DOUBLE_EQ(nn::smooth_l1(1.0), 0.5);
  EXPECT_DOUBLE_EQ(nn::smooth_l1(-1.0), 0.5);
  EXPECT_DOUBLE_EQ(nn::smooth_l1(2.0), 1.5);
  EXPECT_DOUBLE_EQ(nn::smooth_l1(0.5), 0.125);
  for (double x : {-1.0, 1.0}) {
    const double h = 1e-6;
    const double numeric = (nn::smooth_l1(x + h) - nn::smooth_l1(x - h)) / (2 * h);
    EXPECT_NEAR(numeric, nn::smooth_l1_grad(x), 1e-4);
    EXPECT_NEAR(nn::smooth_l1(x + h), nn::smooth_l1(x - h), 1e-5);
  }
}

TEST(MultiboxLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.5);
  const std::size_t anchors = 12, classes = 4;
  AnchorAssignment asg;
  asg.labels = {0, 2, 0, 0, 1, 0, 0, 3, 0, 0, 0, 0};
  asg.gt_index.assign(anchors, -1);
  asg.overlap.assign(anchors, 0.0);
  std::vector<float> targets(anchors * 4);
  for (float& t : targets) t = static_cast<float>(z(rng));
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> conf(anchors * classes), loc(anchors * 4);
    for (double& v : conf) v = z(rng);
    for (double& v : loc) v = z(rng);
    DetectorLossConfig cfg;
    std::vector<double> gc(conf.size(), 0.0), gl(loc.size(), 0.0);
    const auto terms = multibox_terms<double>(conf, loc, classes, asg, targets, cfg, gc, gl);
    EXPECT_EQ(terms.positives, 3u);
    EXPECT_EQ(terms.negatives, 9u);
    // The hard-negative selection is piecewise constant, so it is held fixed by
    // perturbing well below the gap between background losses.
    const auto fc = [&](const std::vector<double>& c) {
      return multibox_terms<double>(c, loc, classes, asg, targets, cfg).classification;
    };
    const auto fl = [&](const std::vector<double>& l) {
      return multibox_terms<double>(conf, l, classes, asg, targets, cfg).localization;
    };
    EXPECT_LT(oracle::relative_error(gc, oracle::numeric_gradient(fc, conf)), 1e-4);
    EXPECT_LT(oracle::relative_error(gl, oracle::numeric_gradient(fl, loc)), 1e-4);
  }
}

TEST(MultiboxLoss, PerfectPredictionsApproachZero) {
  const std::size_t anchors = 6, classes = 3;
  AnchorAssignment asg;
  asg.labels = {0, 1, 0, 2, 0, 0};
  asg.gt_index.assign(anchors, -1);
  asg.overlap.assign(anchors, 0.0);
  std::vector<float> targets(anchors * 4, 0.0f);
  for (std::size_t i = 4; i < 8; ++i) targets[i] = 0.3f;
  std::vector<double> conf(anchors * classes, 0.0), loc(anchors * 4, 0.0);
  for (std::size_t a = 0; a < anchors; ++a) conf[a * classes + asg.labels[a]] = 40.0;
  for (std::size_t i = 4; i < 8; ++i) loc[i] = 0.3f;
  const auto t = multibox_terms<double>(conf, loc, classes, asg, targets, DetectorLossConfig{});
  EXPECT_LT(t.classification + t.localization, 1e-12);
}

TEST(MultiboxLoss, NothingSelectedIsAnError) {
  AnchorAssignment asg;
  asg.labels.assign(3, 0);
  std::vector<double> conf(6, 0.0), loc(12, 0.0);
  std::vector<float> targets(12, 0.0f);
  EXPECT_THROW(multibox_terms<double>(conf, loc, 2, asg, targets, DetectorLossConfig{}), std::invalid_argument);
}

TEST(Nms, SmallCases) {
  const Detection only{0.7, 1, nb(0.1, 0.1, 0.3, 0.3), 5};
  const auto one = nms({only}, 0.45);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].index, 5);
  const auto pair = nms({{0.8, 0, nb(0, 0, 0.5, 0.5), 1}, {0.9, 0, nb(0, 0, 0.5, 0.5), 2}}, 0.5);
  ASSERT_EQ(pair.size(), 1u);
  EXPECT_DOUBLE_EQ(pair[0].prob, 0.9);
  // Equal probabilities: the smaller index wins.
  const auto tie = nms({{0.6, 0, nb(0, 0, 0.5, 0.5), 9}, {0.6, 0, nb(0, 0, 0.5, 0.5), 4}}, 0.5);
  ASSERT_EQ(tie.size(), 1u);
  EXPECT_EQ(tie[0].index, 4);
  // Different classes never suppress each other unless per_class is off.
  const std::vector<Detection> two_classes{{0.9, 0, nb(0, 0, 0.5, 0.5), 0}, {0.8, 1, nb(0, 0, 0.5, 0.5), 1}};
  EXPECT_EQ(nms(two_classes, 0.5).size(), 2u);
  EXPECT_EQ(nms(two_classes, 0.5, false).size(), 1u);
}

TEST(Nms, MatchesQuadraticReference) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto dets = oracle::random_detections(rng, 1 + trial % 50, 3);
    const double thr = trial % 2 ? 0.45 : 0.3;
    const bool per_class = trial % 3 != 0;
    const auto got = nms(dets, thr, per_class);
    const auto want = oracle::nms(dets, thr, per_class);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i].index, want[i].index);
  }
}

TEST(Nms, IdempotentAndSeparated) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto kept = nms(oracle::random_detections(rng, 50, 2), 0.45);
    const auto again = nms(kept, 0.45);
    ASSERT_EQ(again.size(), kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      EXPECT_EQ(again[i].index, kept[i].index);
      if (i) EXPECT_GE(kept[i - 1].prob, kept[i].prob);
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id == kept[j].class_id) EXPECT_LE(iou(kept[i].bbox, kept[j].bbox), 0.45);
      }
    }
  }
}

TEST(Decode, StubbedHeadEmitsTheHotAnchor) {
  const AnchorSet anchors = generate_anchors();
  const std::size_t classes = 3, hot = 5000;
  std::vector<float> conf(anchors.size() * classes, 0.0f), loc(anchors.size() * 4, 0.0f);
  for (std::size_t a = 0; a < anchors.size(); ++a) conf[a * classes] = 20.0f;
  conf[hot * classes] = 0.0f;
  conf[hot * classes + 2] = 20.0f;
  DecodeConfig cfg;
  const auto dets = decode_detections(conf, loc, classes, anchors, cfg);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 1);
  EXPECT_EQ(dets[0].index, static_cast<long>(hot));
  EXPECT_NEAR(dets[0].bbox.x_min, anchors.boxes[hot].x_min, 1e-6);
  EXPECT_NEAR(dets[0].bbox.y_max, anchors.boxes[hot].y_max, 1e-6);
  cfg.report_floor = 1.01;
  EXPECT_TRUE(decode_detections(conf, loc, classes, anchors, cfg).empty());
}

TEST(Detection, JsonShape) {
  const Detection d{0.75, 3, nb(0.1, 0.2, 0.3, 0.4), 7};
  const nlohmann::json j = to_json(d);
  EXPECT_EQ(j["class"], 3);
  EXPECT_EQ(j["bbox"].size(), 4u);
  const Detection back = detection_from_json(j);
  EXPECT_EQ(back.bbox, d.bbox);
  EXPECT_DOUBLE_EQ(back.prob, 0.75);
  EXPECT_THROW(detection_from_json(nlohmann::json::parse(R"({"prob":1.5,"class":0,"bbox":[0,0,1,1]})")),
               std::invalid_argument);
}

TEST(SsdNetwork, HeadsCoverEveryAnchor) {
  SsdConfig cfg;
  cfg.classes = 7;
  SsdNetwork net(cfg, 1);
  EXPECT_EQ(net.anchors().size(), 8732u);
  const auto out = net.forward(nn::Tensor({1, 300, 300, 3}, 0.5f), nn::Mode::infer);
  EXPECT_EQ(out.conf.shape(), (nn::Shape{1, 8732, 1, 8}));
  EXPECT_EQ(out.loc.shape(), (nn::Shape{1, 8732, 1, 4}));
  for (const auto& d : detect(net, cv::Mat(300, 300, CV_32FC3, cv::Scalar::all(0.4)))) {
    EXPECT_TRUE(d.bbox.valid());
    EXPECT_GE(d.prob, cfg.decode.report_floor);
  }
}

TEST(SsdNetwork, FrozenBackboneIsUntouchedByTraining) {
  SsdNetwork net(SsdConfig{}, 2);
  const auto before = nn::export_state(net.modules());
  DetectorTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.freeze_backbone = true;
  fine_tune(net, tiny_samples(2, 1), cfg);
  const auto after = nn::export_state(net.modules());
  std::size_t head_changed = 0;
  for (const auto& [name, t] : before.tensors) {
    if (name.rfind("backbone/", 0) == 0) {
      EXPECT_EQ(t.data, after.tensors.at(name).data) << name;
    } else if (t.data != after.tensors.at(name).data) {
      ++head_changed;
    }
  }
  EXPECT_GT(head_changed, 0u);
}

TEST(FineTune, LossFallsOnADeskCorpus) {
  SsdNetwork net(SsdConfig{}, 3);
  DetectorTrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  const auto history = fine_tune(net, tiny_samples(8, 2), cfg);
  ASSERT_EQ(history.size(), 5u);
  EXPECT_LT(history.back().loss, history.front().loss);
}

TEST(FineTune, PublishedConfigAndMissingBoxes) {
  const DetectorTrainConfig cfg;
  EXPECT_EQ(cfg.epochs, 30);
  EXPECT_EQ(cfg.batch_size, 32);
  EXPECT_NO_THROW(cfg.validate());
  DatasetManifest m("/nowhere");
  m.add({"a.png", 0});
  EXPECT_THROW(load_detector_samples(m, 300, [](const ImageRecord&) { return 0; }), std::invalid_argument);
}

TEST(Checkpoint, DetectorSaveLoadKeepsOutputs) {
  SsdNetwork net(SsdConfig{}, 4);
  const fs::path dir = fs::temp_directory_path() / "vmmc_detector_ckpt";
  fs::remove_all(dir);
  save_detector(dir, net, DetectorTrainConfig{}, {});
  auto loaded = load_detector(dir);
  const nn::Tensor x({1, 300, 300, 3}, 0.3f);
  const auto a = net.forward(x, nn::Mode::infer);
  const auto b = loaded->forward(x, nn::Mode::infer);
  EXPECT_EQ(std::vector<float>(a.conf.values().begin(), a.conf.values().end()),
            std::vector<float>(b.conf.values().begin(), b.conf.values().end()));
}

TEST(Converter, ReordersPublishedLayouts) {
  nn::TensorArchive src;
  nn::StoredTensor oihw{{2, 3, 2, 2}, {}};
  for (int i = 0; i < 24; ++i) oihw.data.push_back(static_cast<float>(i));
  src.tensors["features.0.weight"] = oihw;
  src.tensors["fc.weight"] = {{2, 3}, {0, 1, 2, 3, 4, 5}};
  src.tensors["features.0.bias"] = {{2}, {7, 8}};
  const auto mapping = parse_weight_map(nlohmann::json::parse(R"({"tensors":[
      {"source":"features.0.weight","target":"backbone/stage1/conv1/kernel","layout":"oihw"},
      {"source":"features.0.bias","target":"backbone/stage1/conv1/bias"},
      {"source":"fc.weight","target":"head/kernel","layout":"dense_out_in"}]})"));
  const auto out = convert_weights(src, mapping);
  const auto& k = out.tensors.at("backbone/stage1/conv1/kernel");
  EXPECT_EQ(k.shape, (std::vector<std::int64_t>{2, 2, 3, 2}));
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
          EXPECT_EQ(k.data[((y * 2 + x) * 3 + i) * 2 + o], oihw.data[((o * 3 + i) * 2 + y) * 2 + x]);
        }
  const auto& d = out.tensors.at("head/kernel");
  EXPECT_EQ(d.data, (std::vector<float>{0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(out.tensors.at("backbone/stage1/conv1/bias").data, (std::vector<float>{7, 8}));
  src.tensors.erase("fc.weight");
  EXPECT_THROW(convert_weights(src, mapping), std::runtime_error);
  EXPECT_THROW(parse_weight_map(nlohmann::json::parse(R"({"tensors":[{"source":"a","target":"b","layout":"hwio?"}]})")),
               std::invalid_argument);
}

TEST(Converter, StubBackboneLoadsIntoTheNetwork) {
  SsdNetwork a(SsdConfig{}, 5), b(SsdConfig{}, 6);
  const auto state = nn::export_state(a.modules());
  std::vector<WeightMapping> mapping;
  nn::TensorArchive renamed;
  for (const auto& [name, t] : state.tensors) {
    if (name.rfind("backbone/", 0) != 0) continue;
    renamed.tensors["published." + name] = t;
    mapping.push_back({"published." + name, name, KernelLayout::as_is});
  }
  const auto converted = convert_weights(renamed, mapping);
  EXPECT_EQ(nn::import_state(b.modules(), converted, false), mapping.size());
  const auto after = nn::export_state(b.modules());
  for (const auto& m : mapping) EXPECT_EQ(after.tensors.at(m.target).data, state.tensors.at(m.target).data);
}
