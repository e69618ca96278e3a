#include "vmmc/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace vmmc {
using nlohmann::json;

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(classes) * classes, 0);
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_) {
    throw std::out_of_range("confusion matrix: label outside 0-" + std::to_string(classes_ - 1));
  }
  ++counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
  ++total_;
}

std::size_t ConfusionMatrix::count(int truth, int predicted) const {
  return counts_.at(static_cast<std::size_t>(truth) * classes_ + predicted);
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (int c = 0; c < classes_; ++c) t += count(c, c);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> predictions, int classes) {
  if (truths.size() != predictions.size()) throw std::invalid_argument("confusion matrix: length mismatch");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < truths.size(); ++i) m.add(truths[i], predictions[i]);
  return m;
}

double accuracy(const ConfusionMatrix& m) {
  if (m.total() == 0) throw std::invalid_argument("accuracy of an empty confusion matrix");
  return double(m.trace()) / double(m.total());
}

std::string confusion_csv(const ConfusionMatrix& m) {
  const auto name = [&](int c) { return m.classes() == kNumClasses ? class_labels()[c].slug : std::to_string(c); };
  std::ostringstream os;
  os << "true\\predicted";
  for (int c = 0; c < m.classes(); ++c) os << ',' << name(c);
  os << '\n';
  for (int t = 0; t < m.classes(); ++t) {
    os << name(t);
    for (int p = 0; p < m.classes(); ++p) os << ',' << m.count(t, p);
    os << '\n';
  }
  return os.str();
}

void save_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << confusion_csv(m);
}

void render_confusion_png(const std::filesystem::path& path, const ConfusionMatrix& m) {
  const int cell = 56, margin = 40, n = m.classes();
  cv::Mat img(margin + n * cell + 8, margin + n * cell + 8, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int t = 0; t < n; ++t) {
    std::size_t row = 0;
    for (int p = 0; p < n; ++p) row += m.count(t, p);
    for (int p = 0; p < n; ++p) {
      const double frac = row ? double(m.count(t, p)) / double(row) : 0.0;
      const cv::Point a(margin + p * cell, margin + t * cell);
      const int shade = static_cast<int>(255 * (1.0 - frac));
      cv::rectangle(img, a, a + cv::Point(cell, cell), cv::Scalar(255, shade, shade), cv::FILLED);
      cv::rectangle(img, a, a + cv::Point(cell, cell), cv::Scalar(200, 200, 200), 1);
      const cv::Scalar ink = frac > 0.5 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0);
      cv::putText(img, std::to_string(m.count(t, p)), a + cv::Point(6, cell / 2 + 5), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                  ink, 1, cv::LINE_AA);
    }
    cv::putText(img, std::to_string(t), cv::Point(12, margin + t * cell + cell / 2 + 5), cv::FONT_HERSHEY_SIMPLEX,
                0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(img, std::to_string(t), cv::Point(margin + t * cell + cell / 2 - 5, 28), cv::FONT_HERSHEY_SIMPLEX,
                0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  }
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

json to_json(const MapReport& r) {
  json classes = json::array();
  for (const auto& c : r.per_class) {
    classes.push_back({{"class", c.class_id}, {"ground_truths", c.ground_truths},
                       {"ap", c.ap ? json(*c.ap) : json(nullptr)}});
  }
  return {{"map", r.map}, {"per_class", classes}, {"true_positives", r.true_positives},
          {"mean_iou", r.mean_iou}, {"mean_localization_error", r.true_positives ? 1.0 - r.mean_iou : 0.0}};
}

double average_precision(std::span<const PrecisionRecallPoint> curve) {
  std::vector<double> recall{0.0}, precision{0.0};
  for (const auto& p : curve) {
    recall.push_back(p.recall);
    precision.push_back(p.precision);
  }
  recall.push_back(1.0);
  precision.push_back(0.0);
  for (std::size_t i = precision.size() - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < recall.size(); ++i) {
    if (recall[i] != recall[i - 1]) ap += (recall[i] - recall[i - 1]) * precision[i];
  }
  return ap;
}

MapReport mean_average_precision(const std::vector<ImageDetections>& detections,
                                 const std::vector<ImageTruth>& truths, double iou_threshold, int classes) {
  std::map<std::string, const ImageTruth*> truth_by_image;
  for (const auto& t : truths) {
    if (!truth_by_image.emplace(t.image_id, &t).second) throw std::invalid_argument("duplicate truth image " + t.image_id);
  }
  struct Ranked {
    const Detection* det;
    const std::string* image;
  };
  MapReport report;
  double iou_sum = 0.0;
  double ap_sum = 0.0;
  std::size_t defined = 0;
  for (int cls = 0; cls < classes; ++cls) {
    ClassAp entry;
    entry.class_id = cls;
    std::map<std::string, std::vector<bool>> used;
    for (const auto& t : truths) {
      std::size_t n = 0;
      for (const auto& g : t.boxes) n += g.class_id == cls;
      entry.ground_truths += n;
      used[t.image_id].assign(t.boxes.size(), false);
    }
    std::vector<Ranked> ranked;
    for (const auto& img : detections) {
      for (const auto& d : img.detections) {
        if (d.class_id == cls) ranked.push_back({&d, &img.image_id});
      }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.det->prob != b.det->prob) return a.det->prob > b.det->prob;
      if (*a.image != *b.image) return *a.image < *b.image;
      return a.det->index < b.det->index;
    });
    if (entry.ground_truths == 0) {
      report.per_class.push_back(std::move(entry));
      continue;
    }
    std::size_t tp = 0, fp = 0;
    for (const auto& r : ranked) {
      const auto it = truth_by_image.find(*r.image);
      double best = -1.0;
      std::size_t best_index = 0;
      if (it != truth_by_image.end()) {
        const auto& boxes = it->second->boxes;
        for (std::size_t g = 0; g < boxes.size(); ++g) {
          if (boxes[g].class_id != cls) continue;
          const double v = iou(boxes[g].box, r.det->bbox);
          if (v > best) {
            best = v;
            best_index = g;
          }
        }
      }
      if (best >= iou_threshold && !used[*r.image][best_index]) {
        used[*r.image][best_index] = true;
        ++tp;
        iou_sum += best;
      } else {
        ++fp;
      }
      entry.curve.push_back({double(tp) / double(entry.ground_truths), double(tp) / double(tp + fp)});
    }
    report.true_positives += tp;
    entry.ap = average_precision(entry.curve);
    ap_sum += *entry.ap;
    ++defined;
    report.per_class.push_back(std::move(entry));
  }
  report.map = defined ? ap_sum / double(defined) : 0.0;
  report.mean_iou = report.true_positives ? iou_sum / double(report.true_positives) : 0.0;
  return report;
}

json to_json(const FpsReport& r) {
  return {{"fps", r.fps}, {"frames", r.frames}, {"warmup_frames", r.warmup_frames},
          {"seconds", r.seconds}, {"hardware", r.hardware}};
}

std::string hardware_description() {
  std::string model = "unknown cpu";
  std::ifstream cpuinfo("/proc/cpuinfo");
  for (std::string line; std::getline(cpuinfo, line);) {
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " logical cores, CPU inference";
}

FpsReport fps_benchmark(const std::function<void(const cv::Mat&)>& detector, const std::vector<cv::Mat>& stream,
                        std::chrono::duration<double> duration, std::size_t warmup_frames) {
  if (stream.empty()) throw std::invalid_argument("fps benchmark: empty stream");
  if (duration.count() <= 0.0) throw std::invalid_argument("fps benchmark: duration must be positive");
  std::size_t next = 0;
  for (std::size_t i = 0; i < warmup_frames; ++i) detector(stream[next++ % stream.size()]);
  using clock = std::chrono::steady_clock;
  FpsReport r;
  r.warmup_frames = warmup_frames;
  r.hardware = hardware_description();
  const auto start = clock::now();
  auto now = start;
  do {
    detector(stream[next++ % stream.size()]);
    ++r.frames;
    now = clock::now();
  } while (now - start < duration);
  r.seconds = std::chrono::duration<double>(now - start).count();
  r.fps = double(r.frames) / r.seconds;
  return r;
}

}  // namespace vmmc
