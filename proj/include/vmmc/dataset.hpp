#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "vmmc/box.hpp"

namespace vmmc {

inline constexpr int kNumClasses = 7;
inline constexpr int kOtherClass = 6;
inline constexpr int kInputSize = 300;

struct ClassLabel {
  int id = 0;
  std::string make;
  std::string model;
  std::string display_name;
  std::string slug;
};

// Fixed class order: six named make-models, then the catch-all class.
const std::array<ClassLabel, kNumClasses>& class_labels();
bool is_valid_class(int id);
// Accepts a numeric id, a slug ("fiat_linea") or a display name, case-insensitively.
std::optional<int> find_class(const std::string& key);

// One row of the reference corpus composition table.
struct CorpusEntry {
  std::string make;
  std::string model;
  int year = 0;
  std::string feature;
  int images = 0;
};

// Per-class image counts of the reference corpus, in class-id order.
const std::array<CorpusEntry, kNumClasses>& reference_corpus();
// The seven make-models pooled into the catch-all class.
const std::array<CorpusEntry, 7>& reference_other_class();

enum class Source { auto_detected, human };
std::string to_string(Source s);
Source parse_source(const std::string& text);

struct ImageRecord {
  std::string image_path;  // relative to the manifest directory
  int class_id = 0;
  std::optional<BoundingBox> bbox;  // pixel coordinates
  Source source = Source::human;
  int width = 0;   // 0 until the image has been probed
  int height = 0;

  bool operator==(const ImageRecord&) const = default;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::filesystem::path root) : root_(std::move(root)) {}

  // Validates the record and keeps class counts and path uniqueness in sync.
  void add(ImageRecord record);

  const std::vector<ImageRecord>& records() const { return records_; }
  const std::array<std::size_t, kNumClasses>& class_counts() const { return counts_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  bool contains(const std::string& image_path) const;

  const std::filesystem::path& root() const { return root_; }
  void set_root(std::filesystem::path root) { root_ = std::move(root); }
  std::filesystem::path resolve(const ImageRecord& r) const { return root_ / r.image_path; }

 private:
  std::filesystem::path root_;
  std::vector<ImageRecord> records_;
  std::unordered_set<std::string> paths_;
  std::array<std::size_t, kNumClasses> counts_{};
};

inline constexpr const char* kManifestHeader = "image_path,class_id,xmin,ymin,xmax,ymax,source";

struct ManifestLoadOptions {
  // Read every image to fill width/height and check boxes against the frame.
  bool probe_images = false;
};

DatasetManifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions opts = {});
DatasetManifest parse_manifest(const std::string& text, std::filesystem::path root,
                               ManifestLoadOptions opts = {});
std::string format_manifest(const DatasetManifest& manifest);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Shortest decimal text that parses back to the same double.
std::string format_number(double v);

// Builds a manifest from <dir>/<class-folder>/<image>; folder names resolve through find_class.
DatasetManifest ingest_directory(const std::filesystem::path& dir,
                                 const std::filesystem::path& manifest_dir);

struct SplitSpec {
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};  // train, val, test

  void validate() const;
};

struct DatasetSplit {
  DatasetManifest train;
  DatasetManifest val;
  DatasetManifest test;
};

// Per-class stratified split: train = floor(f_train * n_c), val = floor(f_val * n_c), test = rest,
// then single records move up so the train and val totals reach floor(f * N).
DatasetSplit split_dataset(const DatasetManifest& manifest, const SplitSpec& spec);

struct AugmentationConfig {
  double flip_prob = 0.5;
  std::pair<double, double> blur_sigma_range{0.0, 1.5};
  double noise_stddev = 0.05;
  std::pair<double, double> zoom_range{0.9, 1.1};
  std::uint64_t rng_seed = 0;

  static AugmentationConfig disabled();
  void validate() const;
};

// Reads an image from disk as 8-bit BGR. Throws when the file cannot be decoded.
cv::Mat read_image(const std::filesystem::path& path);

// Integer H x W x 3 image -> size x size x 3 float image in [0, 1]: centered zero
// padding to a square, bilinear resize, division by the storage maximum.
cv::Mat preprocess(const cv::Mat& image, int size = kInputSize);

// Where the original frame lands inside the padded square, in pixels of that square.
struct PadGeometry {
  int side = 0;
  int offset_x = 0;
  int offset_y = 0;
};
PadGeometry pad_geometry(int width, int height);

// Normalized box on the preprocessed square -> pixel box on the original frame, clipped.
BoundingBox to_frame_pixels(const BoundingBox& normalized, int width, int height);
// Pixel box on the original frame -> normalized box on the preprocessed square.
BoundingBox to_square_normalized(const BoundingBox& pixels, int width, int height);

// Random zoom, horizontal flip, Gaussian blur and Gaussian noise; output clipped to [0, 1].
cv::Mat augment(const cv::Mat& image, const AugmentationConfig& cfg);

// Seeds for independent per-sample draws.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace vmmc
