#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "vmmc/dataset.hpp"
#include "vmmc/nn/layers.hpp"

namespace vmmc {

// Three-section bottleneck that keeps the input shape: y = relu(F(x, W) + x).
// filters[2] must equal the input channel count; every section has stride 1.
struct IdentityBlockSpec {
  std::array<int, 3> filters{};
  int kernel = 3;
};

// Projection bottleneck: y = relu(F(x, W) + Ws x). The first main section and the
// shortcut use the block stride, the main branch's first two sections share a filter
// count, and the third section matches the shortcut.
struct ConvBlockSpec {
  std::array<int, 3> filters{};
  int kernel = 3;
  int stride = 2;

  int shortcut_filters() const { return filters[2]; }
};

class IdentityBlock final : public nn::Layer {
 public:
  IdentityBlock(std::string name, int in_channels, IdentityBlockSpec spec);

  nn::Tensor forward(const nn::Tensor& x, nn::Mode mode) override;
  nn::Tensor backward(const nn::Tensor& grad_out) override;
  nn::Shape output_shape(const nn::Shape& in) const override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;
  void collect_buffers(std::vector<nn::Buffer>& out) override;
  void initialize(std::mt19937_64& rng) override;

  nn::Sequential& main_branch() { return main_; }

 private:
  nn::Sequential main_;
  nn::Tensor output_;
};

class ConvBlock final : public nn::Layer {
 public:
  ConvBlock(std::string name, int in_channels, ConvBlockSpec spec);

  nn::Tensor forward(const nn::Tensor& x, nn::Mode mode) override;
  nn::Tensor backward(const nn::Tensor& grad_out) override;
  nn::Shape output_shape(const nn::Shape& in) const override;
  void collect_parameters(std::vector<nn::Parameter*>& out) override;
  void collect_buffers(std::vector<nn::Buffer>& out) override;
  void initialize(std::mt19937_64& rng) override;

  nn::Sequential& main_branch() { return main_; }
  nn::Sequential& shortcut() { return shortcut_; }

 private:
  nn::Sequential main_;
  nn::Sequential shortcut_;
  nn::Tensor output_;
};

struct StageSpec {
  ConvBlockSpec conv;
  int identity_blocks = 1;
};

struct NetworkSpec {
  int stem_filters = 64;
  int stem_kernel = 7;
  int stem_stride = 2;
  int stem_padding = 3;
  int pool_window = 3;
  int pool_stride = 2;
  std::vector<StageSpec> stages;
  int classes = kNumClasses;

  // 30 weight layers and 1,132,775 trainable parameters.
  static NetworkSpec reference();

  void validate() const;
  // Weight layers: stem, every convolution in every block (shortcuts included), the head.
  int depth() const;
};

void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);

class ClassifierNetwork {
 public:
  explicit ClassifierNetwork(NetworkSpec spec, std::uint64_t seed = 0);

  // (n, h, w, 3) in [0, 1] -> (n, 1, 1, classes) logits.
  nn::Tensor forward(const nn::Tensor& batch, nn::Mode mode);
  nn::Tensor backward(const nn::Tensor& grad_logits);

  std::vector<nn::Parameter*> parameters() { return nn::parameters_of(*body_); }
  std::size_t trainable_parameter_count();
  int depth() const { return spec_.depth(); }
  const NetworkSpec& spec() const { return spec_; }
  nn::Shape output_shape(const nn::Shape& input) const { return body_->output_shape(input); }
  nn::Sequential& body() { return *body_; }

 private:
  NetworkSpec spec_;
  std::unique_ptr<nn::Sequential> body_;
};

// Class-probability vector, one entry per class id.
class ClassScores {
 public:
  ClassScores() = default;
  explicit ClassScores(std::vector<double> probs);
  static ClassScores from_logits(std::span<const float> logits);

  const std::vector<double>& probs() const { return probs_; }
  std::vector<std::pair<int, double>> entries() const;
  std::vector<std::pair<int, double>> ranked() const;
  int top_class() const;
  double top_prob() const;

 private:
  std::vector<double> probs_;
};

nlohmann::json to_json(const ClassScores& s, bool ranked = false);
ClassScores scores_from_json(const nlohmann::json& j);

struct TrainConfig {
  int batch_size = 32;
  int epochs = 100;
  std::string loss = "categorical_crossentropy";
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int input_size = kInputSize;
  bool augment = true;
  AugmentationConfig augmentation;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

// Preprocessed images held in memory with their labels.
struct LabeledImages {
  std::vector<cv::Mat> images;  // CV_32FC3, input_size square
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
};

using FrameTransform = std::function<cv::Mat(const cv::Mat& frame, const ImageRecord& record)>;

// Reads and preprocesses every record; transform (if set) maps the raw frame first.
LabeledImages load_labeled_images(const DatasetManifest& manifest, int input_size,
                                  const FrameTransform& transform = {});

nn::Tensor make_batch(const std::vector<cv::Mat>& images, std::span<const std::size_t> indices);

struct TrainResult {
  std::unique_ptr<ClassifierNetwork> network;  // best-validation weights
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

TrainResult train_classifier(const LabeledImages& train, const LabeledImages& val,
                             const TrainConfig& cfg, const NetworkSpec& spec = NetworkSpec::reference(),
                             const EpochCallback& on_epoch = {});
TrainResult train_classifier(const DatasetManifest& train, const DatasetManifest& val,
                             const TrainConfig& cfg, const NetworkSpec& spec = NetworkSpec::reference(),
                             const EpochCallback& on_epoch = {});

// Loss and accuracy in inference mode.
std::pair<double, double> evaluate_classifier(ClassifierNetwork& net, const LabeledImages& data,
                                              int batch_size = 32);

ClassScores predict(ClassifierNetwork& net, const cv::Mat& preprocessed);
std::vector<ClassScores> predict_all(ClassifierNetwork& net, const std::vector<cv::Mat>& images,
                                     int batch_size = 32);

// Checkpoint directory: weights.safetensors, config.json, metrics.csv.
void save_classifier(const std::filesystem::path& dir, ClassifierNetwork& net, const TrainConfig& cfg,
                     const std::vector<EpochMetrics>& history, int best_epoch);
struct LoadedClassifier {
  std::unique_ptr<ClassifierNetwork> network;
  TrainConfig config;
};
LoadedClassifier load_classifier(const std::filesystem::path& dir);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history);

}  // namespace vmmc
