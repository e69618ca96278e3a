#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "vmmc/dataset.hpp"
#include "vmmc/detector.hpp"

namespace vmmc {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes = kNumClasses);

  void add(int truth, int predicted);
  std::size_t count(int truth, int predicted) const;
  std::size_t total() const { return total_; }
  std::size_t trace() const;
  int classes() const { return classes_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int classes_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> predictions,
                                 int classes = kNumClasses);

// trace / total; throws on an empty matrix.
double accuracy(const ConfusionMatrix& m);

// Header "true\predicted" then one labelled row per class.
std::string confusion_csv(const ConfusionMatrix& m);
void save_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m);
// Row-normalized heat map with counts in every cell.
void render_confusion_png(const std::filesystem::path& path, const ConfusionMatrix& m);

struct PrecisionRecallPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ClassAp {
  int class_id = 0;
  std::size_t ground_truths = 0;
  std::optional<double> ap;  // empty when the class has no ground truth
  std::vector<PrecisionRecallPoint> curve;
};

struct MapReport {
  std::vector<ClassAp> per_class;
  double map = 0.0;  // mean over classes with ground truth
  std::size_t true_positives = 0;
  double mean_iou = 0.0;  // over true positives
};

nlohmann::json to_json(const MapReport& r);

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

struct ImageTruth {
  std::string image_id;
  std::vector<GroundTruth> boxes;
};

// Area under the monotone precision envelope over all recall steps.
double average_precision(std::span<const PrecisionRecallPoint> curve);

// Per class: rank detections by probability, a detection is a true positive when its
// best same-image gt reaches the IoU threshold and is still unmatched.
MapReport mean_average_precision(const std::vector<ImageDetections>& detections,
                                 const std::vector<ImageTruth>& truths, double iou_threshold = 0.5,
                                 int classes = kNumClasses);

struct FpsReport {
  double fps = 0.0;
  std::size_t frames = 0;  // timed frames
  std::size_t warmup_frames = 0;
  double seconds = 0.0;
  std::string hardware;
};

nlohmann::json to_json(const FpsReport& r);

// CPU model and logical core count of this host.
std::string hardware_description();

// Cycles through the stream until duration has elapsed after the warmup frames.
FpsReport fps_benchmark(const std::function<void(const cv::Mat&)>& detector, const std::vector<cv::Mat>& stream,
                        std::chrono::duration<double> duration, std::size_t warmup_frames = 5);

}  // namespace vmmc
