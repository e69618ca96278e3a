#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "vmmc/classifier.hpp"
#include "vmmc/dataset.hpp"
#include "vmmc/evaluation.hpp"
#include "vmmc/ssd.hpp"

namespace vmmc {

enum class ExperimentId { I = 1, II = 2, III = 3 };

ExperimentId parse_experiment(int id);

struct ExperimentSpec {
  ExperimentId id = ExperimentId::I;
  SplitSpec split;  // defaults to 0.8/0.1/0.1; Experiment III uses 0.8/0/0.2
  TrainConfig classifier;
  NetworkSpec network = NetworkSpec::reference();
  DetectorTrainConfig detector;
  std::optional<std::filesystem::path> detector_checkpoint;  // car detector for II, backbone source for III
  double car_confidence = 0.5;

  static ExperimentSpec defaults(ExperimentId id, std::uint64_t seed = 0);
  void validate() const;
};

nlohmann::json to_json(const ExperimentSpec& s);

// Largest car box at or above the confidence floor, in frame pixels.
std::optional<BoundingBox> largest_car(const cv::Mat& frame, const CarDetector& detector, double confidence_floor);
std::optional<cv::Mat> crop_largest_car(const cv::Mat& frame, const CarDetector& detector, double confidence_floor = 0.5);
cv::Mat crop(const cv::Mat& frame, const BoundingBox& pixels);

// Copy of the manifest whose boxes are the detector's largest car (auto-sourced) or
// absent when nothing passes the floor. Written out, this is the box CSV that a
// detector-built ground truth for Experiment III consists of.
DatasetManifest detect_car_boxes(const DatasetManifest& manifest, const CarDetector& detector,
                                 double confidence_floor);

// Frame -> crop of the record's box in detected, or the full frame when it has none.
FrameTransform crop_transform(const DatasetManifest& detected);

struct ExperimentReport {
  ExperimentId id = ExperimentId::I;
  std::filesystem::path run_dir;
  std::optional<double> train_accuracy;
  std::optional<double> valid_accuracy;
  std::optional<double> test_accuracy;
  std::optional<ConfusionMatrix> confusion;
  std::size_t fallback_full_frames = 0;
  std::optional<double> train_map;
  std::optional<double> test_map;  // merged valid/test score
  std::optional<double> test_mean_localization_error;
  int best_epoch = 0;
};

nlohmann::json to_json(const ExperimentReport& r);

struct RunHooks {
  std::function<void(const std::string&)> log;
  // Used instead of loading ExperimentSpec::detector_checkpoint when set.
  SsdNetwork* car_detector = nullptr;
};

// Writes runs/<timestamp>-exp<id>/ with config.json, metrics.csv, confusion.csv,
// confusion.png, report.json, the split manifests and a checkpoints/ directory.
ExperimentReport run_experiment(const ExperimentSpec& spec, const DatasetManifest& manifest,
                                const std::filesystem::path& runs_root, const RunHooks& hooks = {});

std::filesystem::path make_run_dir(const std::filesystem::path& runs_root, ExperimentId id);

}  // namespace vmmc
