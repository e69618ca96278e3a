#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "vmmc/dataset.hpp"
#include "vmmc/detector.hpp"
#include "vmmc/nn/layers.hpp"
#include "vmmc/nn/safetensors.hpp"

namespace vmmc {

// A run of conv -> norm -> relu sections; the stage output feeds a prediction head when source is set.
struct SsdStage {
  int filters = 64;
  int kernel = 3;
  int stride = 2;
  int padding = 1;
  int convs = 1;  // extra sections after the first use stride 1, same padding
  bool source = false;
};

struct SsdConfig {
  int classes = 1;  // foreground classes; background is added as class 0 of the heads
  AnchorPlan anchors = AnchorPlan::ssd300();
  std::vector<SsdStage> stages = lite_backbone();
  DetectorLossConfig loss;
  DecodeConfig decode;

  // 300 -> 150 -> 75 -> 38 -> 19 -> 10 -> 5 -> 3 -> 1 with the last six maps as sources.
  static std::vector<SsdStage> lite_backbone();
  void validate() const;
};

void to_json(nlohmann::json& j, const SsdConfig& c);
void from_json(const nlohmann::json& j, SsdConfig& c);

class SsdNetwork {
 public:
  explicit SsdNetwork(SsdConfig cfg, std::uint64_t seed = 0);

  // conf: (n, anchors, 1, classes + 1) logits. loc: (n, anchors, 1, 4) offsets.
  struct Output {
    nn::Tensor conf;
    nn::Tensor loc;
  };

  // A frozen backbone runs in inference mode and receives no gradient.
  Output forward(const nn::Tensor& batch, nn::Mode mode);
  void backward(const nn::Tensor& conf_grad, const nn::Tensor& loc_grad);

  void set_backbone_frozen(bool frozen);
  bool backbone_frozen() const { return frozen_; }

  std::vector<nn::Parameter*> parameters() { return nn::parameters_of(modules_); }
  std::vector<nn::Parameter*> backbone_parameters();
  std::size_t trainable_parameter_count() { return nn::trainable_count(parameters()); }

  const SsdConfig& config() const { return cfg_; }
  const AnchorSet& anchors() const { return anchors_; }
  std::size_t head_classes() const { return static_cast<std::size_t>(cfg_.classes) + 1; }
  nn::Sequential& modules() { return modules_; }

 private:
  SsdConfig cfg_;
  AnchorSet anchors_;
  nn::Sequential modules_;
  std::vector<nn::Sequential*> stages_;
  std::vector<nn::Conv2D*> conf_heads_;
  std::vector<nn::Conv2D*> loc_heads_;
  std::vector<std::size_t> source_stage_;
  std::vector<nn::Shape> source_shapes_;
  bool frozen_ = false;
};

// Detections on one preprocessed square image; boxes normalized to that square.
std::vector<Detection> detect(SsdNetwork& net, const cv::Mat& preprocessed);
std::vector<Detection> detect(SsdNetwork& net, const cv::Mat& preprocessed, const DecodeConfig& cfg);
std::vector<std::vector<Detection>> detect_all(SsdNetwork& net, const std::vector<cv::Mat>& images,
                                               int batch_size = 16);

struct SsdLossValue {
  double total = 0.0;
  double classification = 0.0;
  double localization = 0.0;
  std::size_t positives = 0;
};

// Batch loss divided by the number of positives; fills the head gradients when given.
SsdLossValue ssd_loss(const SsdNetwork::Output& out, const std::vector<AnchorAssignment>& assignments,
                      const std::vector<std::vector<float>>& targets, const DetectorLossConfig& cfg,
                      SsdNetwork::Output* grad = nullptr);

struct DetectorSample {
  cv::Mat image;  // CV_32FC3 square
  std::vector<GroundTruth> gt;
};

// label_of maps a record to its foreground class; throws on a record without a box.
std::vector<DetectorSample> load_detector_samples(const DatasetManifest& manifest, int image_size,
                                                  const std::function<int(const ImageRecord&)>& label_of);

struct DetectorTrainConfig {
  int batch_size = 32;
  int epochs = 30;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  double flip_prob = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const DetectorTrainConfig& c);
void from_json(const nlohmann::json& j, DetectorTrainConfig& c);

struct DetectorEpoch {
  int epoch = 0;
  double loss = 0.0;
  double classification = 0.0;
  double localization = 0.0;
};

std::vector<DetectorEpoch> fine_tune(SsdNetwork& net, const std::vector<DetectorSample>& train,
                                     const DetectorTrainConfig& cfg,
                                     const std::function<void(const DetectorEpoch&)>& on_epoch = {});

// Checkpoint directory: weights.safetensors, config.json, metrics.csv.
void save_detector(const std::filesystem::path& dir, SsdNetwork& net, const DetectorTrainConfig& train,
                   const std::vector<DetectorEpoch>& history);
std::unique_ptr<SsdNetwork> load_detector(const std::filesystem::path& dir);

// Car candidate in pixels of the original frame.
struct DetectionCandidate {
  BoundingBox bbox;
  double confidence = 0.0;
  std::string detector_class = "car";
};

using CarDetector = std::function<std::vector<DetectionCandidate>(const cv::Mat& frame)>;

// Wraps a detector whose foreground class car_class is the car category. Candidates
// below min_confidence are dropped before they reach the caller.
CarDetector make_car_detector(SsdNetwork& net, int car_class = 0, double min_confidence = 0.01);

// Source layouts a published checkpoint may use for convolution kernels.
enum class KernelLayout { as_is, oihw, dense_out_in };

struct WeightMapping {
  std::string source;
  std::string target;
  KernelLayout layout = KernelLayout::as_is;
};

// {"tensors": [{"source": "...", "target": "...", "layout": "oihw"}, ...]}
std::vector<WeightMapping> parse_weight_map(const nlohmann::json& j);
nn::TensorArchive convert_weights(const nn::TensorArchive& source, const std::vector<WeightMapping>& mapping);

}  // namespace vmmc
