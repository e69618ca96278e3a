#pragma once

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "vmmc/classifier.hpp"
#include "vmmc/evaluation.hpp"
#include "vmmc/fraudwatch.hpp"
#include "vmmc/ssd.hpp"

namespace fixture {

inline vmmc::BoundingBox box(double x0, double y0, double x1, double y1) { return {x0, y0, x1, y1, true}; }

// Three images, two classes with ground truth, one class with detections only.
//
// class 0, 3 gt, ranked: TP FP FP TP FP
//   recall    1/3 1/3 1/3 2/3 2/3
//   precision 1   1/2 1/3 1/2 2/5
//   envelope  1 at 1/3, 1/2 at 2/3  ->  AP = 1/3 + 1/6 = 1/2
// class 1, 2 gt, ranked: FP TP TP FP
//   recall    0 1/2 1 1
//   precision 0 1/2 2/3 1/2
//   envelope  2/3 at 1/2 and 1      ->  AP = 2/3
// mAP = 7/12
struct MapFixture {
  std::vector<vmmc::ImageDetections> detections;
  std::vector<vmmc::ImageTruth> truths;
  double ap0 = 0.5;
  double ap1 = 2.0 / 3.0;
  double map = 7.0 / 12.0;
};

inline MapFixture map_fixture() {
  MapFixture f;
  const auto g1 = box(0.1, 0.1, 0.4, 0.4), g2 = box(0.5, 0.5, 0.9, 0.9), g3 = box(0.2, 0.2, 0.6, 0.6),
             g4 = box(0.0, 0.0, 0.3, 0.3), g5 = box(0.6, 0.1, 0.9, 0.5);
  f.truths = {{"A", {{g1, 0}, {g2, 1}}}, {"B", {{g3, 0}}}, {"C", {{g4, 0}, {g5, 1}}}};
  f.detections = {
      {"A",
       {{0.95, 0, g1, 0}, {0.80, 0, g1, 1}, {0.95, 1, box(0.0, 0.0, 0.2, 0.2), 2}, {0.50, 1, g2, 3},
        {0.70, 3, g2, 4}}},
      {"B", {{0.90, 0, box(0.7, 0.7, 0.9, 0.9), 0}, {0.70, 0, g3, 1}, {0.40, 1, box(0.1, 0.1, 0.2, 0.2), 2}}},
      // IoU 1/3 with g4, and 0.875 with g5.
      {"C", {{0.60, 0, box(0.15, 0.0, 0.45, 0.3), 0}, {0.90, 1, box(0.6, 0.1, 0.9, 0.45), 1}}},
  };
  return f;
}

// Probability p on class k, the rest spread evenly.
inline vmmc::ClassScores peaked(int k, double p) {
  std::vector<double> probs(vmmc::kNumClasses, (1.0 - p) / (vmmc::kNumClasses - 1));
  probs[k] = p;
  return vmmc::ClassScores(probs);
}

struct FraudCase {
  bool plate_known;
  bool class_match;
  bool confident;
  vmmc::VerdictStatus expected;
};

inline std::vector<FraudCase> fraud_truth_table() {
  using S = vmmc::VerdictStatus;
  return {
      {true, true, true, S::authorized},       {true, false, true, S::fraud},
      {false, true, true, S::unregistered},    {false, false, true, S::unregistered},
      {true, true, false, S::low_confidence},  {true, false, false, S::low_confidence},
      {false, true, false, S::low_confidence}, {false, false, false, S::low_confidence},
  };
}

// Registry holds "34XYZ99" as class 2. An unknown plate with class_match means the
// prediction equals the class the plate would have had.
inline vmmc::Verdict run_fraud_case(const FraudCase& c, double floor = 0.8) {
  vmmc::Registry registry;
  registry.upsert("34 XYZ 99", 2);
  const int predicted = c.class_match ? 2 : 5;
  const double prob = c.confident ? 0.97 : 0.6;
  const vmmc::Observation obs{c.plate_known ? "34-xyz-99" : "06 NEW 1", peaked(predicted, prob),
                              "2026-01-01T00:00:00Z", "cam-1"};
  return vmmc::evaluate(obs, *registry.snapshot(), floor);
}

// Images whose first pixel encodes what the stub detector reports: 0 means no car,
// 255 makes the detector fail, anything else is a car covering code percent of the
// frame plus a decoy at a quarter of that size.
inline std::vector<std::filesystem::path> write_coded_images(const std::filesystem::path& dir,
                                                             const std::vector<int>& codes,
                                                             const std::string& prefix = "img") {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%03zu.png", prefix.c_str(), i);
    const auto path = dir / name;
    cv::imwrite(path.string(), cv::Mat(60, 80, CV_8UC3, cv::Scalar::all(codes[i])));
    out.push_back(path);
  }
  return out;
}

inline double coded_fraction(int code) { return code / 100.0; }

inline std::vector<vmmc::DetectionCandidate> coded_detector(const cv::Mat& frame) {
  const int code = frame.at<cv::Vec3b>(0, 0)[0];
  if (code == 255) throw std::runtime_error("stub detector failure");
  if (code == 0) return {};
  const auto centred = [&](double fraction) {
    const double w = frame.cols * std::sqrt(fraction), h = frame.rows * std::sqrt(fraction);
    const double x0 = (frame.cols - w) / 2, y0 = (frame.rows - h) / 2;
    return vmmc::BoundingBox{x0, y0, x0 + w, y0 + h, false};
  };
  return {{centred(coded_fraction(code) / 4), 0.9, "car"}, {centred(coded_fraction(code)), 0.8, "car"}};
}

}  // namespace fixture
