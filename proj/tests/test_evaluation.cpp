#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <thread>

#include <opencv2/imgcodecs.hpp>

#include "fixtures.hpp"
#include "vmmc/evaluation.hpp"

using namespace vmmc;
namespace fs = std::filesystem;

TEST(Confusion, DiagonalAndSingleColumn) {
  const std::vector<int> truths{0, 1, 2, 3, 4, 5, 6, 6};
  const auto m = confusion_matrix(truths, truths);
  EXPECT_EQ(m.trace(), truths.size());
  EXPECT_DOUBLE_EQ(accuracy(m), 1.0);
  const std::vector<int> zeros(truths.size(), 0);
  const auto z = confusion_matrix(truths, zeros);
  for (int t = 0; t < kNumClasses; ++t)
    for (int p = 1; p < kNumClasses; ++p) EXPECT_EQ(z.count(t, p), 0u);
  EXPECT_EQ(z.count(6, 0), 2u);
}

TEST(Confusion, RandomPairsAgreeWithDirectCounting) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> label(0, kNumClasses - 1);
  std::vector<int> t(100), p(100);
  for (int i = 0; i < 100; ++i) {
    t[i] = label(rng);
    p[i] = rng() % 3 ? t[i] : label(rng);
  }
  const auto m = confusion_matrix(t, p);
  std::size_t same = 0, sum = 0;
  for (int i = 0; i < 100; ++i) same += t[i] == p[i];
  for (int a = 0; a < kNumClasses; ++a)
    for (int b = 0; b < kNumClasses; ++b) {
      std::size_t direct = 0;
      for (int i = 0; i < 100; ++i) direct += t[i] == a && p[i] == b;
      EXPECT_EQ(m.count(a, b), direct);
      sum += m.count(a, b);
    }
  EXPECT_EQ(sum, 100u);
  EXPECT_DOUBLE_EQ(accuracy(m), same / 100.0);
  std::vector<std::size_t> order(100);
  for (std::size_t i = 0; i < 100; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> t2, p2;
  for (auto i : order) {
    t2.push_back(t[i]);
    p2.push_back(p[i]);
  }
  EXPECT_EQ(confusion_matrix(t2, p2), m);
}

TEST(Accuracy, FixturesAndErrors) {
  std::vector<int> t(100, 1), p(100, 1);
  for (int i = 0; i < 13; ++i) p[i] = 4;
  EXPECT_DOUBLE_EQ(accuracy(confusion_matrix(t, p)), 0.87);
  EXPECT_DOUBLE_EQ(accuracy(confusion_matrix(t, std::vector<int>(100, 2))), 0.0);
  EXPECT_THROW(accuracy(ConfusionMatrix{}), std::invalid_argument);
  EXPECT_THROW(confusion_matrix(std::vector<int>{0}, std::vector<int>{7}), std::out_of_range);
  EXPECT_THROW(confusion_matrix(std::vector<int>{0, 1}, std::vector<int>{0}), std::invalid_argument);
}

TEST(Confusion, CsvAndImage) {
  const auto m = confusion_matrix(std::vector<int>{0, 0, 1}, std::vector<int>{0, 1, 1}, 2);
  const std::string csv = confusion_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')).rfind("true\\predicted", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const fs::path png = fs::temp_directory_path() / "vmmc_confusion.png";
  render_confusion_png(png, confusion_matrix(std::vector<int>{0, 1, 2}, std::vector<int>{0, 1, 1}));
  EXPECT_FALSE(cv::imread(png.string()).empty());
}

TEST(MeanAveragePrecision, HandBuiltFixture) {
  const auto f = fixture::map_fixture();
  const MapReport r = mean_average_precision(f.detections, f.truths);
  ASSERT_EQ(r.per_class.size(), static_cast<std::size_t>(kNumClasses));
  EXPECT_NEAR(*r.per_class[0].ap, f.ap0, 1e-9);
  EXPECT_NEAR(*r.per_class[1].ap, f.ap1, 1e-9);
  EXPECT_FALSE(r.per_class[3].ap.has_value());
  EXPECT_NEAR(r.map, f.map, 1e-9);
  EXPECT_EQ(r.true_positives, 4u);
  EXPECT_TRUE(to_json(r)["per_class"][3]["ap"].is_null());
  for (const auto& c : r.per_class) {
    for (std::size_t i = 1; i < c.curve.size(); ++i) EXPECT_GE(c.curve[i].recall, c.curve[i - 1].recall);
  }
}

TEST(MeanAveragePrecision, PerfectAndEmpty) {
  const auto f = fixture::map_fixture();
  std::vector<ImageDetections> perfect;
  for (const auto& t : f.truths) {
    ImageDetections d{t.image_id, {}};
    for (const auto& g : t.boxes) d.detections.push_back({1.0, g.class_id, g.box, 0});
    perfect.push_back(d);
  }
  EXPECT_DOUBLE_EQ(mean_average_precision(perfect, f.truths).map, 1.0);
  const MapReport none = mean_average_precision({}, f.truths);
  EXPECT_DOUBLE_EQ(none.map, 0.0);
  EXPECT_DOUBLE_EQ(*none.per_class[1].ap, 0.0);
}

TEST(MeanAveragePrecision, OrderInvariantAndBounded) {
  auto f = fixture::map_fixture();
  const double base = mean_average_precision(f.detections, f.truths).map;
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(f.detections.begin(), f.detections.end(), rng);
    std::shuffle(f.truths.begin(), f.truths.end(), rng);
    for (auto& d : f.detections) std::shuffle(d.detections.begin(), d.detections.end(), rng);
    const auto r = mean_average_precision(f.detections, f.truths);
    EXPECT_NEAR(r.map, base, 1e-12);
    for (const auto& c : r.per_class) {
      if (c.ap) {
        EXPECT_GE(*c.ap, 0.0);
        EXPECT_LE(*c.ap, 1.0);
      }
    }
  }
}

TEST(MeanAveragePrecision, EachTruthMatchesOnce) {
  const ImageTruth t{"x", {{fixture::box(0.1, 0.1, 0.5, 0.5), 2}}};
  std::vector<ImageDetections> d{{"x", {}}};
  for (int i = 0; i < 5; ++i) d[0].detections.push_back({0.9 - 0.1 * i, 2, fixture::box(0.1, 0.1, 0.5, 0.5), i});
  const auto r = mean_average_precision(d, {t});
  EXPECT_EQ(r.true_positives, 1u);
  EXPECT_DOUBLE_EQ(*r.per_class[2].ap, 1.0);
}

TEST(Fps, HundredMillisecondStub) {
  const std::vector<cv::Mat> stream(3, cv::Mat(8, 8, CV_8UC3));
  const auto stub = [](const cv::Mat&) { std::this_thread::sleep_for(std::chrono::milliseconds(100)); };
  const FpsReport r = fps_benchmark(stub, stream, std::chrono::seconds(2), 2);
  EXPECT_NEAR(r.fps, 10.0, 1.0);
  EXPECT_EQ(r.warmup_frames, 2u);
  EXPECT_FALSE(r.hardware.empty());
  EXPECT_EQ(to_json(r)["hardware"], r.hardware);
}

TEST(Fps, WarmupFramesAreExcluded) {
  const std::vector<cv::Mat> stream(1, cv::Mat(4, 4, CV_8UC3));
  std::size_t calls = 0;
  const auto counting = [&](const cv::Mat&) {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  };
  const auto cold = fps_benchmark(counting, stream, std::chrono::milliseconds(200), 0);
  EXPECT_EQ(calls, cold.frames);
  calls = 0;
  const auto warm = fps_benchmark(counting, stream, std::chrono::milliseconds(200), 5);
  EXPECT_EQ(calls, warm.frames + 5);
  EXPECT_THROW(fps_benchmark(counting, {}, std::chrono::seconds(1)), std::invalid_argument);
}
