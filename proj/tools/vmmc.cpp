#include <csignal>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vmmc/annotation.hpp"
#include "vmmc/classifier.hpp"
#include "vmmc/dataset.hpp"
#include "vmmc/evaluation.hpp"
#include "vmmc/fraudwatch.hpp"
#include "vmmc/http.hpp"
#include "vmmc/nn/state.hpp"
#include "vmmc/pipeline.hpp"
#include "vmmc/ssd.hpp"
#include "vmmc/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vmmc;

namespace {

void log_line(const std::string& m) { std::cerr << m << std::endl; }

std::array<double, 3> parse_fractions(const std::string& text) {
  std::array<double, 3> f{};
  std::stringstream in(text);
  std::string cell;
  std::size_t i = 0;
  while (std::getline(in, cell, ',')) {
    if (i == 3) throw std::invalid_argument("fractions take three values");
    f[i++] = std::stod(cell);
  }
  if (i != 3) throw std::invalid_argument("fractions take three values");
  return f;
}

// Same records with paths relative to a new manifest directory.
DatasetManifest rebase(const DatasetManifest& m, const fs::path& dir) {
  DatasetManifest out(dir);
  for (ImageRecord r : m.records()) {
    r.image_path = fs::relative(fs::absolute(m.resolve(r)), fs::absolute(dir)).generic_string();
    out.add(r);
  }
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

int class_arg(const std::string& key) {
  const auto id = find_class(key);
  if (!id) throw std::invalid_argument("unknown class " + key);
  return *id;
}

// classes.json: {"<folder under root>": <class id, slug or name>, ...}
std::vector<std::pair<fs::path, int>> read_class_folders(const fs::path& path, const fs::path& root) {
  std::vector<std::pair<fs::path, int>> out;
  for (const auto& [folder, cls] : read_json(path).items()) {
    const int id = cls.is_number_integer() ? cls.get<int>() : class_arg(cls.get<std::string>());
    if (!is_valid_class(id)) throw std::invalid_argument("class id out of range for " + folder);
    out.emplace_back(root / folder, id);
  }
  return out;
}

void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int sig = 0;
  sigwait(&set, &sig);
}

struct PredictionLine {
  std::string image_path;
  std::optional<int> predicted;
  std::vector<Detection> detections;
};

// {"image_path": p, "class": k} or {"image_path": p, "scores": [...]} or
// {"image_path": p, "detections": [{"prob","class","bbox"}, ...]}
std::vector<PredictionLine> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<PredictionLine> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line);
    PredictionLine p;
    p.image_path = j.at("image_path").get<std::string>();
    if (j.contains("class")) p.predicted = j.at("class").get<int>();
    if (j.contains("scores")) p.predicted = scores_from_json(j.at("scores")).top_class();
    if (j.contains("detections")) {
      for (const auto& d : j.at("detections")) p.detections.push_back(detection_from_json(d));
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vehicle make and model classification toolkit"};
  app.require_subcommand(1);

  std::string dir, out, manifest_path, ckpt, image, classes_path, detector_dir, store_path, host = "127.0.0.1";
  std::uint64_t seed = 0;
  std::string fractions = "0.8,0.1,0.1";
  double certain_size = 0.1, threshold = 0.5, conf = 0.5, floor = 0.8;
  int experiment = 1, epochs = -1, batch = -1, input_size = -1, port = 8080, car_class = 0, per_class = 100;

  auto* ingest = app.add_subcommand("ingest", "build a manifest from <dir>/<class-folder>/<image>");
  ingest->add_option("dir", dir)->required();
  ingest->add_option("--out", out)->required();

  auto* split = app.add_subcommand("split", "stratified train/val/test split");
  split->add_option("manifest", manifest_path)->required();
  split->add_option("--seed", seed);
  split->add_option("--fractions", fractions);
  split->add_option("--out", out, "output directory (defaults to the manifest directory)");

  auto* annotate = app.add_subcommand("annotate", "auto-annotate class folders and queue the rest for review");
  annotate->add_option("root", dir)->required();
  annotate->add_option("--classes", classes_path)->required();
  annotate->add_option("--detector", detector_dir)->required();
  annotate->add_option("--car-class", car_class);
  annotate->add_option("--certain-size", certain_size);
  annotate->add_option("--threshold", threshold);
  annotate->add_option("--out", out)->required();
  annotate->add_option("--store", store_path, "review store (defaults to <out>.review.json)");

  auto* serve_review = app.add_subcommand("serve-review", "review queue HTTP API");
  serve_review->add_option("--store", store_path)->required();
  serve_review->add_option("--host", host);
  serve_review->add_option("--port", port);

  auto* export_cmd = app.add_subcommand("export-annotations", "write the rows of a review store as a manifest");
  export_cmd->add_option("--store", store_path)->required();
  export_cmd->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "train the classifier (1, 2) or the detector (3)");
  train->add_option("--experiment", experiment)->check(CLI::Range(1, 3));
  train->add_option("--manifest", manifest_path)->required();
  train->add_option("--epochs", epochs);
  train->add_option("--batch", batch);
  train->add_option("--input-size", input_size);
  train->add_option("--seed", seed);
  train->add_option("--detector", detector_dir, "car detector checkpoint");
  train->add_option("--out", out)->required();

  auto* pretrain = app.add_subcommand("train-car-detector", "train a one-class car detector on any boxed manifest");
  pretrain->add_option("--manifest", manifest_path)->required();
  pretrain->add_option("--epochs", epochs);
  pretrain->add_option("--batch", batch);
  pretrain->add_option("--seed", seed);
  pretrain->add_option("--out", out)->required();

  auto* predict_cmd = app.add_subcommand("predict", "class probabilities for one image");
  predict_cmd->add_option("--ckpt", ckpt)->required();
  predict_cmd->add_option("--image", image)->required();

  auto* detect_cmd = app.add_subcommand("detect", "detections for one image, one JSON line each");
  detect_cmd->add_option("--ckpt", ckpt)->required();
  detect_cmd->add_option("--image", image)->required();
  detect_cmd->add_option("--conf", conf);

  auto* run = app.add_subcommand("run", "run an experiment end to end");
  run->add_option("--experiment", experiment)->check(CLI::Range(1, 3));
  run->add_option("--manifest", manifest_path)->required();
  run->add_option("--seed", seed);
  run->add_option("--epochs", epochs);
  run->add_option("--batch", batch);
  run->add_option("--input-size", input_size);
  run->add_option("--detector", detector_dir);
  run->add_option("--out", out)->default_val("runs");

  std::string pred_path, metric = "accuracy";
  auto* eval = app.add_subcommand("eval", "score predictions against a manifest");
  eval->add_option("--pred", pred_path)->required();
  eval->add_option("--truth", manifest_path)->required();
  eval->add_option("--metric", metric)->check(CLI::IsMember({"accuracy", "confusion", "map"}));
  eval->add_option("--out", out)->required();

  std::string registry_path, audit_path;
  auto* serve_fraud = app.add_subcommand("serve-fraud", "registry and fraud verdict HTTP API");
  serve_fraud->add_option("--registry", registry_path)->required();
  serve_fraud->add_option("--ckpt", ckpt);
  serve_fraud->add_option("--audit", audit_path);
  serve_fraud->add_option("--floor", floor);
  serve_fraud->add_option("--host", host);
  serve_fraud->add_option("--port", port);

  auto* synth = app.add_subcommand("synth", "write a synthetic labeled corpus");
  synth->add_option("--out", out)->required();
  synth->add_option("--per-class", per_class);
  synth->add_option("--seed", seed);

  std::string source_path, map_path;
  auto* convert = app.add_subcommand("convert-weights", "rename and re-layout a published checkpoint");
  convert->add_option("--source", source_path)->required();
  convert->add_option("--map", map_path)->required();
  convert->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      const fs::path out_path = out;
      const DatasetManifest m = ingest_directory(dir, out_path.parent_path().empty() ? "." : out_path.parent_path());
      save_manifest(out_path, m);
      std::cout << m.size() << " records\n";
    } else if (*split) {
      const DatasetManifest m = load_manifest(manifest_path);
      SplitSpec spec{seed, parse_fractions(fractions)};
      const DatasetSplit s = split_dataset(m, spec);
      const fs::path target = out.empty() ? m.root() : fs::path(out);
      fs::create_directories(target);
      save_manifest(target / "train.csv", rebase(s.train, target));
      save_manifest(target / "val.csv", rebase(s.val, target));
      save_manifest(target / "test.csv", rebase(s.test, target));
      std::cout << json{{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}}.dump() << '\n';
    } else if (*annotate) {
      AnnotationConfig cfg;
      cfg.certain_size = certain_size;
      cfg.detector_confidence_threshold = threshold;
      auto net = load_detector(detector_dir);
      const fs::path out_path = out;
      const fs::path root = out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path();
      AnnotationStore store = run_campaign(read_class_folders(classes_path, dir), root,
                                           make_car_detector(*net, car_class), cfg);
      store.export_csv(out_path);
      store.save(store_path.empty() ? fs::path(out + ".review.json") : fs::path(store_path));
      std::cout << to_json(store.stats()).dump() << '\n';
    } else if (*serve_review) {
      AnnotationStore store = AnnotationStore::load(store_path);
      store.set_persist_path(store_path);
      ReviewServer server(store, store.root());
      std::cerr << "review API on " << host << ':' << port << std::endl;
      if (!server.listen(host, port)) throw std::runtime_error("cannot bind port " + std::to_string(port));
    } else if (*export_cmd) {
      AnnotationStore::load(store_path).export_csv(out);
    } else if (*train) {
      const DatasetManifest m = load_manifest(manifest_path);
      const ExperimentId id = parse_experiment(experiment);
      ExperimentSpec spec = ExperimentSpec::defaults(id, seed);
      if (id == ExperimentId::III) {
        if (epochs > 0) spec.detector.epochs = epochs;
        if (batch > 0) spec.detector.batch_size = batch;
        const DatasetSplit s = split_dataset(m, spec.split);
        SsdConfig cfg;
        cfg.classes = kNumClasses;
        SsdNetwork net(cfg, seed);
        if (!detector_dir.empty()) {
          auto source = load_detector(detector_dir);
          auto state = nn::export_state(source->modules());
          std::erase_if(state.tensors, [](const auto& kv) { return kv.first.rfind("backbone/", 0) != 0; });
          nn::import_state(net.modules(), state, false);
        }
        const auto samples = load_detector_samples(s.train, cfg.anchors.image_size,
                                                   [](const ImageRecord& r) { return r.class_id; });
        const auto history = fine_tune(net, samples, spec.detector, [](const DetectorEpoch& e) {
          log_line("epoch " + std::to_string(e.epoch) + " loss " + format_number(e.loss));
        });
        save_detector(out, net, spec.detector, history);
      } else {
        if (epochs > 0) spec.classifier.epochs = epochs;
        if (batch > 0) spec.classifier.batch_size = batch;
        if (input_size > 0) spec.classifier.input_size = input_size;
        spec.validate();
        const DatasetSplit s = split_dataset(m, spec.split);
        FrameTransform transform;
        if (id == ExperimentId::II) {
          if (detector_dir.empty()) throw std::invalid_argument("experiment 2 needs --detector");
          auto net = load_detector(detector_dir);
          transform = crop_transform(detect_car_boxes(m, make_car_detector(*net), spec.car_confidence));
        }
        const int size = spec.classifier.input_size;
        const auto result = train_classifier(load_labeled_images(s.train, size, transform),
                                             load_labeled_images(s.val, size, transform), spec.classifier,
                                             spec.network, [](const EpochMetrics& e) {
                                               log_line("epoch " + std::to_string(e.epoch) + " val_acc " +
                                                        format_number(e.val_acc));
                                             });
        save_classifier(out, *result.network, spec.classifier, result.history, result.best_epoch);
      }
    } else if (*pretrain) {
      const DatasetManifest m = load_manifest(manifest_path);
      DetectorTrainConfig cfg;
      cfg.seed = seed;
      if (epochs > 0) cfg.epochs = epochs;
      if (batch > 0) cfg.batch_size = batch;
      SsdNetwork net(SsdConfig{}, seed);
      const auto samples = load_detector_samples(m, net.config().anchors.image_size, [](const ImageRecord&) { return 0; });
      const auto history = fine_tune(net, samples, cfg, [](const DetectorEpoch& e) {
        log_line("epoch " + std::to_string(e.epoch) + " loss " + format_number(e.loss) + " cls " +
                 format_number(e.classification) + " loc " + format_number(e.localization));
      });
      save_detector(out, net, cfg, history);
    } else if (*predict_cmd) {
      auto loaded = load_classifier(ckpt);
      const cv::Mat x = preprocess(read_image(image), loaded.config.input_size);
      std::cout << to_json(predict(*loaded.network, x), true).dump() << '\n';
    } else if (*detect_cmd) {
      auto net = load_detector(ckpt);
      DecodeConfig cfg = net->config().decode;
      cfg.report_floor = conf;
      const cv::Mat x = preprocess(read_image(image), net->config().anchors.image_size);
      for (const auto& d : detect(*net, x, cfg)) std::cout << to_json(d).dump() << '\n';
    } else if (*run) {
      const DatasetManifest m = load_manifest(manifest_path);
      ExperimentSpec spec = ExperimentSpec::defaults(parse_experiment(experiment), seed);
      if (epochs > 0) spec.classifier.epochs = spec.detector.epochs = epochs;
      if (batch > 0) spec.classifier.batch_size = spec.detector.batch_size = batch;
      if (input_size > 0) spec.classifier.input_size = input_size;
      if (!detector_dir.empty()) spec.detector_checkpoint = fs::path(detector_dir);
      const ExperimentReport report = run_experiment(spec, m, out, {log_line, nullptr});
      std::cout << to_json(report).dump(2) << '\n';
    } else if (*eval) {
      const DatasetManifest truth = load_manifest(manifest_path, {.probe_images = metric == "map"});
      const auto preds = read_predictions(pred_path);
      std::map<std::string, const ImageRecord*> by_path;
      for (const auto& r : truth.records()) by_path[r.image_path] = &r;
      fs::create_directories(out);
      json report;
      if (metric == "map") {
        std::vector<ImageDetections> dets;
        std::vector<ImageTruth> truths;
        for (const auto& r : truth.records()) {
          if (!r.bbox) continue;
          truths.push_back({r.image_path, {{to_square_normalized(*r.bbox, r.width, r.height), r.class_id}}});
        }
        for (const auto& p : preds) dets.push_back({p.image_path, p.detections});
        report = to_json(mean_average_precision(dets, truths));
      } else {
        std::vector<int> t, p;
        for (const auto& line : preds) {
          const auto it = by_path.find(line.image_path);
          if (it == by_path.end()) throw std::invalid_argument("prediction for unknown image " + line.image_path);
          if (!line.predicted) throw std::invalid_argument("prediction without a class: " + line.image_path);
          t.push_back(it->second->class_id);
          p.push_back(*line.predicted);
        }
        const ConfusionMatrix cm = confusion_matrix(t, p);
        report = {{"accuracy", accuracy(cm)}, {"images", t.size()}};
        if (metric == "confusion") {
          save_confusion_csv(fs::path(out) / "confusion.csv", cm);
          render_confusion_png(fs::path(out) / "confusion.png", cm);
        }
      }
      std::ofstream(fs::path(out) / "report.json") << report.dump(2) << '\n';
      std::cout << report.dump() << '\n';
    } else if (*serve_fraud) {
      Registry registry;
      if (fs::exists(registry_path)) registry.load_csv(registry_path);
      AuditLog log(audit_path);
      FraudWatch watch(registry, log, floor);
      StubPlateReader reader;
      VehicleClassifier classify;
      std::optional<LoadedClassifier> loaded;
      std::mutex net_mutex;
      if (!ckpt.empty()) {
        loaded = load_classifier(ckpt);
        classify = [&](const cv::Mat& frame) {
          const cv::Mat x = preprocess(frame, loaded->config.input_size);
          std::lock_guard lock(net_mutex);
          return predict(*loaded->network, x);
        };
      }
      FraudServer server(watch, reader, classify);
      const int bound = server.start(host, port);
      std::cerr << "fraud API on " << host << ':' << bound << std::endl;
      wait_for_signal();
      server.stop();
      registry.save_csv(registry_path);
    } else if (*synth) {
      SyntheticConfig cfg;
      cfg.images_per_class = per_class;
      cfg.seed = seed;
      const DatasetManifest m = write_synthetic_corpus(out, cfg);
      std::cout << m.size() << " images\n";
    } else if (*convert) {
      const auto converted = convert_weights(nn::read_safetensors(source_path), parse_weight_map(read_json(map_path)));
      nn::write_safetensors(out, converted);
      std::cout << converted.tensors.size() << " tensors\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
