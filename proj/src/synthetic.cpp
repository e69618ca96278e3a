#include "vmmc/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace vmmc {
namespace fs = std::filesystem;

namespace {

struct Silhouette {
  std::vector<cv::Point2d> cabin;  // unit box, y grows downwards
  double body_top = 0.45;
  double aspect = 0.45;  // height / width
};

const Silhouette& silhouette(int class_id) {
  static const std::vector<Silhouette> table = {
      {{{0.22, 0.45}, {0.32, 0.08}, {0.68, 0.08}, {0.80, 0.45}}, 0.45, 0.42},
      {{{0.18, 0.45}, {0.30, 0.10}, {0.58, 0.10}, {0.72, 0.45}}, 0.48, 0.40},
      {{{0.28, 0.45}, {0.36, 0.02}, {0.66, 0.02}, {0.74, 0.45}}, 0.42, 0.48},
      {{{0.10, 0.45}, {0.22, 0.05}, {0.88, 0.05}, {0.92, 0.45}}, 0.45, 0.55},
      {{{0.18, 0.45}, {0.20, 0.06}, {0.84, 0.06}, {0.86, 0.45}}, 0.45, 0.50},
      {{{0.30, 0.50}, {0.38, 0.22}, {0.64, 0.22}, {0.70, 0.50}}, 0.50, 0.34},
      {{{0.04, 0.45}, {0.06, 0.00}, {0.96, 0.00}, {0.96, 0.45}}, 0.40, 0.62},
  };
  return table.at(static_cast<std::size_t>(class_id));
}

cv::Scalar hsv_to_bgr(double h, double s, double v) {
  cv::Mat px(1, 1, CV_8UC3, cv::Scalar(std::clamp(h, 0.0, 179.0), std::clamp(s, 0.0, 255.0), std::clamp(v, 0.0, 255.0)));
  cv::cvtColor(px, px, cv::COLOR_HSV2BGR);
  const auto c = px.at<cv::Vec3b>(0, 0);
  return {double(c[0]), double(c[1]), double(c[2])};
}

}  // namespace

void SyntheticConfig::validate() const {
  if (images_per_class < 1) throw std::invalid_argument("synthetic: images_per_class must be >= 1");
  if (width < 32 || height < 32) throw std::invalid_argument("synthetic: frame too small");
  if (!(min_vehicle_width > 0.0 && min_vehicle_width <= max_vehicle_width && max_vehicle_width <= 0.95)) {
    throw std::invalid_argument("synthetic: vehicle width range must lie in (0, 0.95]");
  }
  if (clutter_shapes < 0) throw std::invalid_argument("synthetic: negative clutter count");
}

SyntheticImage render_vehicle(int class_id, std::uint64_t seed, const SyntheticConfig& cfg) {
  cfg.validate();
  if (!is_valid_class(class_id)) throw std::invalid_argument("synthetic: unknown class");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  SyntheticImage out;
  out.class_id = class_id;
  cv::Mat img(cfg.height, cfg.width, CV_8UC3, hsv_to_bgr(uni(0, 179), uni(0, 40), uni(70, 190)));
  for (int i = 0; i < cfg.clutter_shapes; ++i) {
    const cv::Scalar c = hsv_to_bgr(uni(0, 179), uni(0, 45), uni(30, 230));
    const cv::Point p(static_cast<int>(uni(0, cfg.width)), static_cast<int>(uni(0, cfg.height)));
    const int r = static_cast<int>(uni(4, cfg.height * 0.3));
    switch (static_cast<int>(uni(0, 3))) {
      case 0:
        cv::rectangle(img, p, p + cv::Point(r, static_cast<int>(uni(4, cfg.height * 0.3))), c, cv::FILLED);
        break;
      case 1:
        cv::circle(img, p, r / 2, c, cv::FILLED, cv::LINE_AA);
        break;
      default:
        cv::line(img, p, cv::Point(static_cast<int>(uni(0, cfg.width)), static_cast<int>(uni(0, cfg.height))), c,
                 static_cast<int>(uni(1, 5)), cv::LINE_AA);
    }
  }

  const Silhouette& sil = silhouette(class_id);
  const double w = cfg.width * uni(cfg.min_vehicle_width, cfg.max_vehicle_width);
  const double h = std::min(w * sil.aspect * uni(0.92, 1.08), cfg.height * 0.9);
  const double x0 = uni(0, cfg.width - w);
  const double y0 = uni(0, cfg.height - h);
  const bool mirrored = u(rng) < 0.5;
  const auto at = [&](double ux, double uy) {
    const double fx = mirrored ? 1.0 - ux : ux;
    return cv::Point(static_cast<int>(std::lround(x0 + fx * w)), static_cast<int>(std::lround(y0 + uy * h)));
  };

  const double hue = std::fmod(class_id * 180.0 / kNumClasses + uni(-4, 4) + 180.0, 180.0);
  const cv::Scalar body = hsv_to_bgr(hue, uni(190, 255), uni(160, 255));
  const cv::Scalar glass = hsv_to_bgr(105, uni(20, 60), uni(190, 235));
  const cv::Scalar tyre = hsv_to_bgr(0, 0, uni(10, 35));

  std::vector<cv::Point> cabin;
  for (const auto& p : sil.cabin) cabin.push_back(at(p.x, p.y));
  cv::fillPoly(img, std::vector<std::vector<cv::Point>>{cabin}, body, cv::LINE_AA);
  std::vector<cv::Point> window;
  for (const auto& p : sil.cabin) {
    const double cx = 0.5 * (sil.cabin[1].x + sil.cabin[2].x);
    window.push_back(at(cx + (p.x - cx) * 0.8, p.y + (sil.body_top - p.y) * 0.25 + 0.04));
  }
  cv::fillPoly(img, std::vector<std::vector<cv::Point>>{window}, glass, cv::LINE_AA);
  cv::rectangle(img, at(0.0, sil.body_top), at(1.0, 0.84), body, cv::FILLED);
  const int radius = std::max(2, static_cast<int>(std::lround(h * 0.16)));
  for (double wx : {0.2, 0.8}) {
    cv::circle(img, at(wx, 1.0 - 0.16), radius, tyre, cv::FILLED, cv::LINE_AA);
  }

  cv::Mat noise(img.size(), CV_16SC3);
  cv::randn(noise, 0, 6);
  cv::Mat wide;
  img.convertTo(wide, CV_16SC3);
  wide += noise;
  wide.convertTo(out.image, CV_8UC3);

  const double top = y0 + std::min({sil.cabin[1].y, sil.cabin[2].y, sil.body_top}) * h;
  out.bbox = {std::clamp(x0, 0.0, double(cfg.width)), std::clamp(top, 0.0, double(cfg.height)),
              std::clamp(x0 + w, 0.0, double(cfg.width)), std::clamp(y0 + h, 0.0, double(cfg.height)), false};
  return out;
}

DatasetManifest write_synthetic_corpus(const fs::path& dir, const SyntheticConfig& cfg) {
  cfg.validate();
  fs::create_directories(dir);
  DatasetManifest manifest(dir);
  for (const ClassLabel& label : class_labels()) {
    fs::create_directories(dir / label.slug);
    for (int i = 0; i < cfg.images_per_class; ++i) {
      const auto img = render_vehicle(label.id, mix_seed(cfg.seed, static_cast<std::uint64_t>(label.id), i), cfg);
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04d.png", label.slug.c_str(), i);
      const std::string rel = label.slug + "/" + name;
      if (!cv::imwrite((dir / rel).string(), img.image)) throw std::runtime_error("cannot write " + rel);
      ImageRecord r;
      r.image_path = rel;
      r.class_id = label.id;
      r.bbox = img.bbox;
      r.source = Source::human;
      r.width = cfg.width;
      r.height = cfg.height;
      manifest.add(r);
    }
  }
  save_manifest(dir / "manifest.csv", manifest);
  return manifest;
}

}  // namespace vmmc
