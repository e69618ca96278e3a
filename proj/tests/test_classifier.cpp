#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "vmmc/classifier.hpp"

using namespace vmmc;
namespace fs = std::filesystem;

namespace {

void set_all(nn::Sequential& seq, float kernel_value) {
  for (nn::Parameter* p : nn::parameters_of(seq)) {
    const bool is_kernel = p->name.ends_with("kernel");
    p->value.fill(is_kernel ? kernel_value : (p->name.ends_with("gamma") ? 1.0f : 0.0f));
  }
}

// Infer-mode normalization with fresh statistics divides by sqrt(1 + epsilon).
const double kBnScale = 1.0 / std::sqrt(1.0 + 1e-3);

nn::Dense& head_of(ClassifierNetwork& net) {
  auto& body = net.body();
  return dynamic_cast<nn::Dense&>(body[body.size() - 1]);
}

LabeledImages toy_two_class(int per_class, int size, std::uint64_t seed) {
  LabeledImages out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> jitter(-0.05f, 0.05f);
  for (int i = 0; i < 2 * per_class; ++i) {
    const int label = i % 2;
    cv::Mat img(size, size, CV_32FC3, cv::Scalar::all(0.2));
    // Class 1 has a bright left half, class 0 a bright right half.
    const cv::Rect half = label ? cv::Rect(0, 0, size / 2, size) : cv::Rect(size / 2, 0, size / 2, size);
    img(half).setTo(cv::Scalar::all(0.8 + jitter(rng)));
    out.images.push_back(img);
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace

TEST(ClassifierNetwork, ReferencePlanCounts) {
  ClassifierNetwork net(NetworkSpec::reference());
  EXPECT_EQ(net.trainable_parameter_count(), 1132775u);
  EXPECT_EQ(net.depth(), 30);
}

TEST(IdentityBlock, ZeroResidualPassesNonNegativeInput) {
  IdentityBlock block("id", 4, {{2, 2, 4}, 3});
  set_all(block.main_branch(), 0.0f);
  nn::Tensor x({1, 3, 3, 4});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 2.0f);
  for (float& v : x.values()) v = u(rng);
  const nn::Tensor y = block.forward(x, nn::Mode::infer);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(IdentityBlock, PreservesShape) {
  IdentityBlock block("id", 64, {{16, 16, 64}, 3});
  EXPECT_EQ(block.output_shape({1, 38, 38, 64}), (nn::Shape{1, 38, 38, 64}));
  std::mt19937_64 rng(2);
  block.initialize(rng);
  EXPECT_EQ(block.forward(nn::Tensor({1, 38, 38, 64}, 0.5f), nn::Mode::infer).shape(), (nn::Shape{1, 38, 38, 64}));
  EXPECT_THROW(IdentityBlock("bad", 32, {{16, 16, 64}, 3}), std::invalid_argument);
}

TEST(IdentityBlock, OnePixelHandComputation) {
  IdentityBlock block("id", 1, {{1, 1, 1}, 3});
  set_all(block.main_branch(), 0.0f);
  auto params = nn::parameters_of(block.main_branch());
  // Kernels in section order a (1x1), b (3x3, only the centre sees the pixel), c (1x1).
  std::vector<nn::Parameter*> kernels;
  for (auto* p : params) {
    if (p->name.ends_with("kernel")) kernels.push_back(p);
  }
  ASSERT_EQ(kernels.size(), 3u);
  kernels[0]->value.values()[0] = 2.0f;
  kernels[1]->value.values()[4] = 3.0f;
  kernels[2]->value.values()[0] = 1.0f;
  nn::Tensor x({1, 1, 1, 1}, 0.5f);
  const double s = kBnScale;
  const double a = 2.0 * 0.5 * s, b = 3.0 * a * s, c = 1.0 * b * s;
  EXPECT_NEAR(block.forward(x, nn::Mode::infer).values()[0], 0.5 + c, 1e-6);
  kernels[2]->value.values()[0] = -1.0f;
  EXPECT_EQ(block.forward(x, nn::Mode::infer).values()[0], 0.0f);  // 0.5 - 3/1.0015 < 0
}

TEST(ConvBlock, HalvesSpatialDimsAndSetsShortcutChannels) {
  ConvBlock block("cb", 3, {{8, 8, 16}, 3, 2});
  EXPECT_EQ(block.output_shape({1, 300, 300, 3}), (nn::Shape{1, 150, 150, 16}));
  EXPECT_EQ(block.output_shape({1, 75, 75, 3}), (nn::Shape{1, 38, 38, 16}));
  EXPECT_THROW(ConvBlock("bad", 3, {{8, 4, 16}, 3, 2}), std::invalid_argument);
}

TEST(ConvBlock, ZeroMainBranchLeavesRectifiedProjection) {
  ConvBlock block("cb", 1, {{1, 1, 1}, 3, 2});
  set_all(block.main_branch(), 0.0f);
  set_all(block.shortcut(), 2.0f);
  nn::Tensor x({1, 2, 2, 1});
  x.values()[0] = 0.4f;  // the only pixel a stride-2 1x1 projection reads
  x.values()[1] = 9.0f;
  x.values()[2] = -9.0f;
  x.values()[3] = 9.0f;
  const nn::Tensor y = block.forward(x, nn::Mode::infer);
  ASSERT_EQ(y.shape(), (nn::Shape{1, 1, 1, 1}));
  EXPECT_NEAR(y.values()[0], 0.8 * kBnScale, 1e-6);
  x.values()[0] = -0.4f;
  EXPECT_EQ(block.forward(x, nn::Mode::infer).values()[0], 0.0f);
}

TEST(ClassifierNetwork, BatchOutputShapeAndSoftmaxRows) {
  ClassifierNetwork net(NetworkSpec::reference(), 3);
  nn::Tensor batch({32, 64, 64, 3});
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : batch.values()) v = u(rng);
  const nn::Tensor logits = net.forward(batch, nn::Mode::infer);
  EXPECT_EQ(logits.shape(), (nn::Shape{32, 1, 1, 7}));
  for (int n = 0; n < 32; ++n) {
    const ClassScores s = ClassScores::from_logits({logits.sample(n), 7});
    double total = 0.0;
    for (double p : s.probs()) total += p;
    EXPECT_NEAR(total, 1.0, 1e-5);
  }
  EXPECT_EQ(net.output_shape({2, 300, 300, 3}), (nn::Shape{2, 1, 1, 7}));
}

TEST(ClassifierNetwork, InconsistentPlanIsRejected) {
  NetworkSpec spec = NetworkSpec::reference();
  spec.stages[1].conv.filters = {32, 16, 64};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = NetworkSpec::reference();
  spec.classes = 0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(ClassifierNetwork, JsonRoundTrip) {
  const NetworkSpec spec = NetworkSpec::reference();
  nlohmann::json j = spec;
  const NetworkSpec back = j.get<NetworkSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.depth(), 30);
}

TEST(Predict, ZeroedHeadGivesUniformScores) {
  ClassifierNetwork net(NetworkSpec::reference(), 5);
  head_of(net).kernel().value.fill(0.0f);
  head_of(net).bias().value.fill(0.0f);
  const ClassScores s = predict(net, cv::Mat(64, 64, CV_32FC3, cv::Scalar::all(0.3)));
  ASSERT_EQ(s.probs().size(), 7u);
  for (double p : s.probs()) EXPECT_NEAR(p, 1.0 / 7.0, 1e-7);
}

TEST(Predict, ArgmaxIgnoresAdditiveShift) {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> z(0.0f, 3.0f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> logits(7), shifted(7);
    for (int i = 0; i < 7; ++i) logits[i] = z(rng);
    const float c = z(rng) * 10.0f;
    for (int i = 0; i < 7; ++i) shifted[i] = logits[i] + c;
    const ClassScores a = ClassScores::from_logits(logits), b = ClassScores::from_logits(shifted);
    EXPECT_EQ(a.top_class(), b.top_class());
    for (int i = 0; i < 7; ++i) EXPECT_NEAR(a.probs()[i], b.probs()[i], 1e-5);
  }
}

TEST(ClassScores, InvariantsAndJson) {
  EXPECT_THROW(ClassScores({0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(ClassScores({-0.1, 1.1}), std::invalid_argument);
  const ClassScores s({0.1, 0.6, 0.3});
  EXPECT_EQ(s.top_class(), 1);
  EXPECT_DOUBLE_EQ(s.top_prob(), 0.6);
  const auto ranked = s.ranked();
  EXPECT_EQ(ranked[0].first, 1);
  EXPECT_EQ(ranked[1].first, 2);
  const nlohmann::json j = to_json(s, true);
  EXPECT_EQ(j[0]["class"], 1);
  EXPECT_DOUBLE_EQ(j[0]["prob"].get<double>(), 0.6);
  EXPECT_EQ(scores_from_json(j).probs(), s.probs());
  EXPECT_THROW(scores_from_json(nlohmann::json::parse(R"([{"class":0,"prob":1},{"class":0,"prob":0}])")),
               std::invalid_argument);
}

TEST(TrainConfig, PublishedDefaultsAreAccepted) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.batch_size, 32);
  EXPECT_EQ(cfg.epochs, 100);
  EXPECT_EQ(cfg.loss, "categorical_crossentropy");
  EXPECT_NO_THROW(cfg.validate());
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.loss = "hinge";
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  nlohmann::json j = cfg;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
}

TEST(Training, SingleImageRunsAPartialBatch) {
  LabeledImages one;
  one.images.push_back(cv::Mat(32, 32, CV_32FC3, cv::Scalar::all(0.5)));
  one.labels.push_back(3);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.input_size = 32;
  const TrainResult r = train_classifier(one, one, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.history[0].train_loss));
}

TEST(Training, MissingTrainClassIsAnError) {
  LabeledImages train = toy_two_class(2, 16, 1), val = toy_two_class(2, 16, 2);
  val.labels[0] = 5;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.input_size = 16;
  EXPECT_THROW(train_classifier(train, val, cfg), std::invalid_argument);
}

TEST(Training, SeparableToyReachesFullTrainAccuracy) {
  const LabeledImages data = toy_two_class(10, 32, 7);
  NetworkSpec spec = NetworkSpec::reference();
  spec.classes = 2;
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 10;
  cfg.input_size = 32;
  cfg.augment = false;
  cfg.seed = 1;
  int first_perfect = 0;
  const TrainResult r = train_classifier(data, data, cfg, spec, [&](const EpochMetrics& m) {
    if (!first_perfect && m.train_acc == 1.0) first_perfect = m.epoch;
  });
  EXPECT_GT(first_perfect, 0);
  EXPECT_LE(first_perfect, 50);
  EXPECT_DOUBLE_EQ(evaluate_classifier(*r.network, data).second, 1.0);
}

TEST(Checkpoint, SaveLoadReproducesPredictions) {
  const LabeledImages data = toy_two_class(4, 32, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.input_size = 32;
  const TrainResult r = train_classifier(data, data, cfg);
  const fs::path dir = fs::temp_directory_path() / "vmmc_ckpt_test";
  fs::remove_all(dir);
  save_classifier(dir, *r.network, cfg, r.history, r.best_epoch);
  EXPECT_TRUE(fs::exists(dir / "weights.safetensors"));
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  std::ifstream metrics(dir / "metrics.csv");
  std::string header;
  std::getline(metrics, header);
  EXPECT_EQ(header, "epoch,train_loss,train_acc,val_loss,val_acc");
  LoadedClassifier loaded = load_classifier(dir);
  EXPECT_EQ(loaded.config.input_size, 32);
  for (const auto& img : data.images) {
    EXPECT_EQ(predict(*loaded.network, img).probs(), predict(*r.network, img).probs());
  }
}
