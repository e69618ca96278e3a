#include "vmmc/pipeline.hpp"

#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "vmmc/nn/state.hpp"

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

ExperimentId parse_experiment(int id) {
  if (id < 1 || id > 3) throw std::invalid_argument("experiment must be 1, 2 or 3");
  return static_cast<ExperimentId>(id);
}

ExperimentSpec ExperimentSpec::defaults(ExperimentId id, std::uint64_t seed) {
  ExperimentSpec s;
  s.id = id;
  s.split.seed = seed;
  s.classifier.seed = seed;
  s.classifier.augmentation.rng_seed = seed;
  s.detector.seed = seed;
  if (id == ExperimentId::III) s.split.fractions = {0.8, 0.0, 0.2};
  return s;
}

void ExperimentSpec::validate() const {
  split.validate();
  if (id == ExperimentId::III) {
    detector.validate();
  } else {
    classifier.validate();
    network.validate();
  }
  if (!(car_confidence >= 0.0 && car_confidence <= 1.0)) throw std::invalid_argument("car confidence must be in [0,1]");
}

json to_json(const ExperimentSpec& s) {
  json j = {{"experiment", static_cast<int>(s.id)},
            {"split", {{"seed", s.split.seed}, {"fractions", s.split.fractions}}},
            {"car_confidence", s.car_confidence},
            {"detector_checkpoint", s.detector_checkpoint ? json(s.detector_checkpoint->string()) : json(nullptr)}};
  if (s.id == ExperimentId::III) {
    j["detector"] = s.detector;
  } else {
    j["classifier"] = s.classifier;
    j["network"] = s.network;
  }
  return j;
}

cv::Mat crop(const cv::Mat& frame, const BoundingBox& b) {
  const int x0 = std::clamp(static_cast<int>(std::floor(b.x_min)), 0, frame.cols - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(b.y_min)), 0, frame.rows - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil(b.x_max)), x0 + 1, frame.cols);
  const int y1 = std::clamp(static_cast<int>(std::ceil(b.y_max)), y0 + 1, frame.rows);
  return frame(cv::Rect(x0, y0, x1 - x0, y1 - y0)).clone();
}

std::optional<BoundingBox> largest_car(const cv::Mat& frame, const CarDetector& detector, double confidence_floor) {
  std::optional<BoundingBox> best;
  for (const auto& c : detector(frame)) {
    if (c.detector_class != "car" || c.confidence < confidence_floor || !(c.bbox.area() > 0.0)) continue;
    if (!best || c.bbox.area() > best->area()) best = c.bbox;
  }
  return best;
}

std::optional<cv::Mat> crop_largest_car(const cv::Mat& frame, const CarDetector& detector, double confidence_floor) {
  const auto box = largest_car(frame, detector, confidence_floor);
  if (!box) return std::nullopt;
  return crop(frame, *box);
}

DatasetManifest detect_car_boxes(const DatasetManifest& manifest, const CarDetector& detector,
                                 double confidence_floor) {
  DatasetManifest out(manifest.root());
  for (ImageRecord r : manifest.records()) {
    const cv::Mat frame = read_image(manifest.resolve(r));
    r.bbox = largest_car(frame, detector, confidence_floor);
    r.source = Source::auto_detected;
    r.width = frame.cols;
    r.height = frame.rows;
    out.add(r);
  }
  return out;
}

FrameTransform crop_transform(const DatasetManifest& detected) {
  auto boxes = std::make_shared<std::map<std::string, std::optional<BoundingBox>>>();
  for (const auto& r : detected.records()) (*boxes)[r.image_path] = r.bbox;
  return [boxes](const cv::Mat& frame, const ImageRecord& r) {
    const auto it = boxes->find(r.image_path);
    if (it == boxes->end() || !it->second) return frame;
    return crop(frame, *it->second);
  };
}

json to_json(const ExperimentReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j = {{"experiment", static_cast<int>(r.id)}, {"run_dir", r.run_dir.string()}};
  if (r.id == ExperimentId::III) {
    j["train_score_map"] = opt(r.train_map);
    j["valid_test_score_map"] = opt(r.test_map);
    j["test_mean_localization_error"] = opt(r.test_mean_localization_error);
  } else {
    j["train_score"] = opt(r.train_accuracy);
    j["valid_score"] = opt(r.valid_accuracy);
    j["test_score"] = opt(r.test_accuracy);
    j["best_epoch"] = r.best_epoch;
    j["fallback_full_frames"] = r.fallback_full_frames;
  }
  return j;
}

fs::path make_run_dir(const fs::path& runs_root, ExperimentId id) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-exp" + std::to_string(static_cast<int>(id));
  fs::path dir = runs_root / base;
  for (int n = 2; fs::exists(dir); ++n) dir = runs_root / (base + "-" + std::to_string(n));
  fs::create_directories(dir / "checkpoints");
  return dir;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_split_index(const fs::path& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "image_path,split\n";
  for (const auto& [name, m] : {std::pair{"train", &split.train}, {"val", &split.val}, {"test", &split.test}}) {
    for (const auto& r : m->records()) out << r.image_path << ',' << name << '\n';
  }
}

ExperimentReport run_classification(const ExperimentSpec& spec, const DatasetManifest& manifest,
                                    const fs::path& dir, const RunHooks& hooks, ExperimentReport report) {
  const auto say = [&](const std::string& m) { if (hooks.log) hooks.log(m); };
  const DatasetSplit split = split_dataset(manifest, spec.split);
  write_split_index(dir / "splits.csv", split);

  FrameTransform transform;
  std::unique_ptr<SsdNetwork> owned;
  if (spec.id == ExperimentId::II) {
    SsdNetwork* net = hooks.car_detector;
    if (!net) {
      if (!spec.detector_checkpoint) throw std::invalid_argument("experiment II needs a car-detector checkpoint");
      owned = load_detector(*spec.detector_checkpoint);
      net = owned.get();
    }
    say("detecting cars in " + std::to_string(manifest.size()) + " images");
    const DatasetManifest detected = detect_car_boxes(manifest, make_car_detector(*net), spec.car_confidence);
    write_text(dir / "detections.csv", format_manifest(detected));
    for (const auto& r : detected.records()) {
      if (!r.bbox) ++report.fallback_full_frames;
    }
    transform = crop_transform(detected);
  }

  const int size = spec.classifier.input_size;
  const LabeledImages train = load_labeled_images(split.train, size, transform);
  const LabeledImages val = load_labeled_images(split.val, size, transform);
  const LabeledImages test = load_labeled_images(split.test, size, transform);
  say("training classifier on " + std::to_string(train.size()) + " images");
  TrainResult result = train_classifier(train, val, spec.classifier, spec.network, [&](const EpochMetrics& m) {
    say("epoch " + std::to_string(m.epoch) + " loss " + format_number(m.train_loss) + " acc " +
        format_number(m.train_acc) + " val_acc " + format_number(m.val_acc));
  });
  ClassifierNetwork& net = *result.network;
  report.best_epoch = result.best_epoch;
  report.train_accuracy = evaluate_classifier(net, train).second;
  if (val.size()) report.valid_accuracy = evaluate_classifier(net, val).second;
  if (test.size()) {
    std::vector<int> predicted;
    for (const auto& s : predict_all(net, test.images)) predicted.push_back(s.top_class());
    report.confusion = confusion_matrix(test.labels, predicted, spec.network.classes);
    report.test_accuracy = accuracy(*report.confusion);
    save_confusion_csv(dir / "confusion.csv", *report.confusion);
    render_confusion_png(dir / "confusion.png", *report.confusion);
  }
  save_classifier(dir / "checkpoints" / "classifier", net, spec.classifier, result.history, result.best_epoch);
  write_metrics_csv(dir / "metrics.csv", result.history);
  return report;
}

std::vector<ImageTruth> truths_of(const DatasetManifest& m, const std::vector<DetectorSample>& samples) {
  std::vector<ImageTruth> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back({m.records()[i].image_path, samples[i].gt});
  return out;
}

MapReport map_of(SsdNetwork& net, const DatasetManifest& m, const std::vector<DetectorSample>& samples) {
  std::vector<cv::Mat> images;
  for (const auto& s : samples) images.push_back(s.image);
  DecodeConfig cfg = net.config().decode;
  cfg.report_floor = cfg.pre_nms_floor;
  std::vector<ImageDetections> dets;
  std::size_t i = 0;
  for (const auto& img : images) {
    dets.push_back({m.records()[i++].image_path, detect(net, img, cfg)});
  }
  return mean_average_precision(dets, truths_of(m, samples), 0.5, net.config().classes);
}

ExperimentReport run_detection(const ExperimentSpec& spec, const DatasetManifest& manifest, const fs::path& dir,
                               const RunHooks& hooks, ExperimentReport report) {
  const auto say = [&](const std::string& m) { if (hooks.log) hooks.log(m); };
  for (const auto& r : manifest.records()) {
    if (!r.bbox) throw std::invalid_argument("experiment III needs a bounding box for every record: " + r.image_path);
  }
  const DatasetSplit split = split_dataset(manifest, spec.split);
  write_split_index(dir / "splits.csv", split);

  SsdConfig cfg;
  cfg.classes = kNumClasses;
  SsdNetwork net(cfg, spec.detector.seed);
  std::unique_ptr<SsdNetwork> owned;
  SsdNetwork* source = hooks.car_detector;
  if (!source && spec.detector_checkpoint) {
    owned = load_detector(*spec.detector_checkpoint);
    source = owned.get();
  }
  if (source) {
    nn::TensorArchive backbone = nn::export_state(source->modules());
    std::erase_if(backbone.tensors, [](const auto& kv) { return kv.first.rfind("backbone/", 0) != 0; });
    const std::size_t loaded = nn::import_state(net.modules(), backbone, false);
    say("initialized " + std::to_string(loaded) + " backbone tensors from the car detector");
  }

  const auto label = [](const ImageRecord& r) { return r.class_id; };
  const int size = cfg.anchors.image_size;
  const auto train = load_detector_samples(split.train, size, label);
  const auto test = load_detector_samples(split.test, size, label);
  say("fine-tuning detector on " + std::to_string(train.size()) + " images");
  const auto history = fine_tune(net, train, spec.detector, [&](const DetectorEpoch& e) {
    say("epoch " + std::to_string(e.epoch) + " loss " + format_number(e.loss));
  });
  save_detector(dir / "checkpoints" / "detector", net, spec.detector, history);
  fs::copy_file(dir / "checkpoints" / "detector" / "metrics.csv", dir / "metrics.csv",
                fs::copy_options::overwrite_existing);

  const MapReport train_map = map_of(net, split.train, train);
  report.train_map = train_map.map;
  if (!test.empty()) {
    const MapReport test_map = map_of(net, split.test, test);
    report.test_map = test_map.map;
    report.test_mean_localization_error = test_map.true_positives ? 1.0 - test_map.mean_iou : 1.0;
    write_text(dir / "map.json", to_json(test_map).dump(2) + "\n");
  }
  return report;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentSpec& spec, const DatasetManifest& manifest, const fs::path& runs_root,
                                const RunHooks& hooks) {
  spec.validate();
  if (manifest.empty()) throw std::invalid_argument("run_experiment: empty manifest");
  ExperimentReport report;
  report.id = spec.id;
  report.run_dir = make_run_dir(runs_root, spec.id);
  json config = to_json(spec);
  config["manifest_root"] = manifest.root().string();
  config["records"] = manifest.size();
  write_text(report.run_dir / "config.json", config.dump(2) + "\n");

  report = spec.id == ExperimentId::III ? run_detection(spec, manifest, report.run_dir, hooks, report)
                                        : run_classification(spec, manifest, report.run_dir, hooks, report);
  write_text(report.run_dir / "report.json", to_json(report).dump(2) + "\n");
  return report;
}

}  // namespace vmmc
