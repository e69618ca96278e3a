#include "vmmc/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace vmmc {
namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
bool parse_exact(const std::string& text, T& out) {
  if (text.empty()) return false;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool is_image_file(const fs::path& p) {
  const std::string ext = lower(p.extension().string());
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp";
}

}  // namespace

// ---------------------------------------------------------------- taxonomy

const std::array<ClassLabel, kNumClasses>& class_labels() {
  static const std::array<ClassLabel, kNumClasses> labels{{
      {0, "Volkswagen", "Passat", "VW Passat", "volkswagen_passat"},
      {1, "Renault", "Fluence", "Renault Fluence", "renault_fluence"},
      {2, "Fiat", "Linea", "Fiat Linea", "fiat_linea"},
      {3, "Volkswagen", "Polo", "VW Polo", "volkswagen_polo"},
      {4, "Renault", "Toros", "Renault Toros", "renault_toros"},
      {5, "Fiat", "Dogan", "Fiat Dogan", "fiat_dogan"},
      {6, "Other", "Other", "Other Class", "other"},
  }};
  return labels;
}

bool is_valid_class(int id) { return id >= 0 && id < kNumClasses; }

std::optional<int> find_class(const std::string& key) {
  int id = -1;
  if (parse_exact(key, id)) return is_valid_class(id) ? std::optional<int>(id) : std::nullopt;
  const std::string k = lower(key);
  for (const auto& label : class_labels()) {
    if (k == label.slug || k == lower(label.display_name)) return label.id;
  }
  return std::nullopt;
}

const std::array<CorpusEntry, kNumClasses>& reference_corpus() {
  static const std::array<CorpusEntry, kNumClasses> rows{{
      {"Volkswagen", "Passat", 2015, "1.6 TDi BlueMotion Comfortline", 4024},
      {"Renault", "Fluence", 2016, "1.5 dCi Touch", 4293},
      {"Fiat", "Linea", 2013, "1.3 Multijet Active Plus", 4234},
      {"Volkswagen", "Polo", 1999, "1.6", 3208},
      {"Renault", "Toros", 2000, "R12", 3783},
      {"Fiat", "Dogan", 1996, "SLX", 4183},
      {"Other", "Other Class", 0, "", 4162},
  }};
  return rows;
}

const std::array<CorpusEntry, 7>& reference_other_class() {
  static const std::array<CorpusEntry, 7> rows{{
      {"Toyota", "Corolla", 2016, "1.4 D-4D Advance", 663},
      {"Volvo", "S60", 2014, "1.6 D Premium", 707},
      {"Peugeot", "206", 2001, "1.4 XR", 468},
      {"Ford", "Focus", 2017, "1.6 TDCi Trend X", 693},
      {"Mercedes-Benz", "C", 2015, "CLA 180d", 608},
      {"Nissan", "Micra", 2016, "1.2 Match", 533},
      {"Audi", "A3 Sedan", 2017, "1.6 TDI", 490},
  }};
  return rows;
}

std::string to_string(Source s) { return s == Source::auto_detected ? "auto" : "human"; }

Source parse_source(const std::string& text) {
  if (text == "auto") return Source::auto_detected;
  if (text == "human") return Source::human;
  throw ManifestError("unknown source '" + text + "'");
}

// ---------------------------------------------------------------- manifest

void DatasetManifest::add(ImageRecord record) {
  if (!is_valid_class(record.class_id)) {
    throw ManifestError("unknown class_id " + std::to_string(record.class_id) + " for " +
                        record.image_path);
  }
  if (record.image_path.empty()) throw ManifestError("empty image_path");
  if (record.image_path.find_first_of(",\n\r") != std::string::npos) {
    throw ManifestError("image_path contains a separator: " + record.image_path);
  }
  if (record.bbox) {
    const BoundingBox& b = *record.bbox;
    if (!b.valid() || b.normalized || b.x_min < 0.0 || b.y_min < 0.0) {
      throw ManifestError("invalid bbox " + to_string(b) + " for " + record.image_path);
    }
    if (record.width > 0 && record.height > 0 &&
        (b.x_max > record.width || b.y_max > record.height)) {
      throw ManifestError("bbox " + to_string(b) + " outside " + std::to_string(record.width) +
                          "x" + std::to_string(record.height) + " frame of " + record.image_path);
    }
  }
  if (!paths_.insert(record.image_path).second) {
    throw ManifestError("duplicate image_path " + record.image_path);
  }
  ++counts_[record.class_id];
  records_.push_back(std::move(record));
}

bool DatasetManifest::contains(const std::string& image_path) const {
  return paths_.count(image_path) != 0;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("format_number failed");
  return std::string(buf, ptr);
}

DatasetManifest parse_manifest(const std::string& text, fs::path root, ManifestLoadOptions opts) {
  DatasetManifest manifest(std::move(root));
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kManifestHeader) {
        throw ManifestError("line 1: expected header '" + std::string(kManifestHeader) + "'");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (fields.size() != 7) throw ManifestError(where + "expected 7 fields");
    ImageRecord r;
    r.image_path = fields[0];
    if (!parse_exact(fields[1], r.class_id)) throw ManifestError(where + "bad class_id");
    const bool any_box =
        !(fields[2].empty() && fields[3].empty() && fields[4].empty() && fields[5].empty());
    if (any_box) {
      BoundingBox b;
      if (!parse_exact(fields[2], b.x_min) || !parse_exact(fields[3], b.y_min) ||
          !parse_exact(fields[4], b.x_max) || !parse_exact(fields[5], b.y_max)) {
        throw ManifestError(where + "bbox must have four numeric cells or none");
      }
      r.bbox = b;
    }
    try {
      r.source = parse_source(fields[6]);
      if (opts.probe_images) {
        const cv::Mat img = cv::imread((manifest.root() / r.image_path).string(), cv::IMREAD_COLOR);
        if (img.empty()) throw ManifestError("cannot read image " + r.image_path);
        r.width = img.cols;
        r.height = img.rows;
      }
      manifest.add(std::move(r));
    } catch (const ManifestError& e) {
      throw ManifestError(where + e.what());
    }
  }
  return manifest;
}

DatasetManifest load_manifest(const fs::path& path, ManifestLoadOptions opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("manifest not found: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.parent_path(), opts);
}

std::string format_manifest(const DatasetManifest& manifest) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& r : manifest.records()) {
    out += r.image_path;
    out += ',';
    out += std::to_string(r.class_id);
    out += ',';
    if (r.bbox) {
      out += format_number(r.bbox->x_min) + "," + format_number(r.bbox->y_min) + "," +
             format_number(r.bbox->x_max) + "," + format_number(r.bbox->y_max);
    } else {
      out += ",,,";
    }
    out += ',';
    out += to_string(r.source);
    out += '\n';
  }
  return out;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << format_manifest(manifest);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

DatasetManifest ingest_directory(const fs::path& dir, const fs::path& manifest_dir) {
  if (!fs::is_directory(dir)) throw ManifestError("not a directory: " + dir.string());
  DatasetManifest manifest(manifest_dir);
  std::vector<fs::path> folders;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) folders.push_back(entry.path());
  }
  std::sort(folders.begin(), folders.end());
  for (const auto& folder : folders) {
    const auto id = find_class(folder.filename().string());
    if (!id) throw ManifestError("folder does not name a class: " + folder.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(folder)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ImageRecord r;
      r.image_path = fs::relative(f, manifest_dir).generic_string();
      r.class_id = *id;
      r.source = Source::human;
      manifest.add(std::move(r));
    }
  }
  return manifest;
}

// ---------------------------------------------------------------- split

void SplitSpec::validate() const {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
}

DatasetSplit split_dataset(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  if (manifest.empty()) throw std::invalid_argument("split_dataset: empty manifest");
  const int nonzero = static_cast<int>(
      std::count_if(spec.fractions.begin(), spec.fractions.end(), [](double f) { return f > 0.0; }));

  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  const auto& records = manifest.records();
  for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].class_id].push_back(i);

  // The 1e-9 guard keeps exact products such as 0.7 * 10 from flooring one short.
  const auto floor_of = [](double f, std::size_t n) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  std::array<std::size_t, kNumClasses> n_train{}, n_val{};
  for (int c = 0; c < kNumClasses; ++c) {
    const std::size_t n = by_class[c].size();
    if (n == 0) continue;
    if (n < static_cast<std::size_t>(nonzero)) {
      throw std::invalid_argument("split_dataset: class " + std::to_string(c) + " has " +
                                  std::to_string(n) + " records, fewer than the " +
                                  std::to_string(nonzero) + " non-empty splits");
    }
    n_train[c] = floor_of(spec.fractions[0], n);
    n_val[c] = std::min(n - n_train[c], floor_of(spec.fractions[1], n));
  }
  // Per-class floors can fall short of the floor of the whole; the shortfall goes to the
  // classes with the largest fractional remainders, one record each, lower id first on ties.
  const auto top_up = [&](double f, std::array<std::size_t, kNumClasses>& counts) {
    const std::size_t target = floor_of(f, records.size());
    std::size_t have = 0;
    for (std::size_t v : counts) have += v;
    std::vector<std::pair<double, int>> order;
    for (int c = 0; c < kNumClasses; ++c) {
      const std::size_t n = by_class[c].size();
      if (n == 0 || n_train[c] + n_val[c] >= n) continue;
      order.emplace_back(f * static_cast<double>(n) - static_cast<double>(counts[c]), c);
    }
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [remainder, c] : order) {
      if (have >= target) break;
      ++counts[c];
      ++have;
    }
  };
  if (spec.fractions[0] > 0.0) top_up(spec.fractions[0], n_train);
  if (spec.fractions[1] > 0.0) top_up(spec.fractions[1], n_val);

  std::vector<int> assignment(records.size(), 2);
  for (int c = 0; c < kNumClasses; ++c) {
    auto& idx = by_class[c];
    const std::size_t n = idx.size();
    if (n == 0) continue;
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(c)));
    // Fisher-Yates with an explicit draw keeps the permutation library-independent.
    for (std::size_t i = n - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t k = 0; k < n; ++k) {
      assignment[idx[k]] = k < n_train[c] ? 0 : (k < n_train[c] + n_val[c] ? 1 : 2);
    }
  }

  DatasetSplit out{DatasetManifest(manifest.root()), DatasetManifest(manifest.root()),
                   DatasetManifest(manifest.root())};
  std::array<std::vector<ImageRecord>, 3> parts;
  for (std::size_t i = 0; i < records.size(); ++i) parts[assignment[i]].push_back(records[i]);
  DatasetManifest* targets[3] = {&out.train, &out.val, &out.test};
  for (int p = 0; p < 3; ++p) {
    for (auto& r : parts[p]) targets[p]->add(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- images

cv::Mat read_image(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot read image " + path.string());
  return img;
}

PadGeometry pad_geometry(int width, int height) {
  PadGeometry g;
  g.side = std::max(width, height);
  g.offset_x = (g.side - width) / 2;
  g.offset_y = (g.side - height) / 2;
  return g;
}

cv::Mat preprocess(const cv::Mat& image, int size) {
  if (image.empty() || image.channels() != 3) {
    throw std::invalid_argument("preprocess: expected a 3-channel image, got " +
                                std::to_string(image.channels()) + " channels");
  }
  double scale = 0.0;
  switch (image.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    default: throw std::invalid_argument("preprocess: expected 8- or 16-bit integer samples");
  }
  if (size <= 0) throw std::invalid_argument("preprocess: size must be positive");
  cv::Mat as_float;
  image.convertTo(as_float, CV_32FC3, scale);
  const PadGeometry g = pad_geometry(image.cols, image.rows);
  cv::Mat square;
  cv::copyMakeBorder(as_float, square, g.offset_y, g.side - image.rows - g.offset_y, g.offset_x,
                     g.side - image.cols - g.offset_x, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  cv::Mat out;
  if (g.side == size) {
    out = square;
  } else {
    cv::resize(square, out, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  }
  cv::min(out, 1.0, out);
  cv::max(out, 0.0, out);
  return out;
}

BoundingBox to_frame_pixels(const BoundingBox& n, int width, int height) {
  const PadGeometry g = pad_geometry(width, height);
  BoundingBox b;
  b.x_min = std::clamp(n.x_min * g.side - g.offset_x, 0.0, double(width));
  b.y_min = std::clamp(n.y_min * g.side - g.offset_y, 0.0, double(height));
  b.x_max = std::clamp(n.x_max * g.side - g.offset_x, 0.0, double(width));
  b.y_max = std::clamp(n.y_max * g.side - g.offset_y, 0.0, double(height));
  return b;
}

BoundingBox to_square_normalized(const BoundingBox& p, int width, int height) {
  const PadGeometry g = pad_geometry(width, height);
  const double side = g.side;
  return BoundingBox{(p.x_min + g.offset_x) / side, (p.y_min + g.offset_y) / side,
                     (p.x_max + g.offset_x) / side, (p.y_max + g.offset_y) / side, true};
}

// ---------------------------------------------------------------- augmentation

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig c;
  c.flip_prob = 0.0;
  c.blur_sigma_range = {0.0, 0.0};
  c.noise_stddev = 0.0;
  c.zoom_range = {1.0, 1.0};
  return c;
}

void AugmentationConfig::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("flip_prob outside [0,1]");
  if (blur_sigma_range.first > blur_sigma_range.second || blur_sigma_range.first < 0.0) {
    throw std::invalid_argument("invalid blur sigma range");
  }
  if (zoom_range.first > zoom_range.second || zoom_range.first <= 0.0) {
    throw std::invalid_argument("invalid zoom range");
  }
  if (!(noise_stddev >= 0.0)) throw std::invalid_argument("noise_stddev must be >= 0");
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(base) ^ a) ^ (b * 0x632BE59BD9B4E019ull));
}

cv::Mat augment(const cv::Mat& image, const AugmentationConfig& cfg) {
  cfg.validate();
  if (image.type() != CV_32FC3) throw std::invalid_argument("augment: expected a float 3-channel image");
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Every draw happens unconditionally so that the stream does not depend on which transforms fire.
  const double zoom = cfg.zoom_range.first + (cfg.zoom_range.second - cfg.zoom_range.first) * unit(rng);
  const bool flip = unit(rng) < cfg.flip_prob;
  const double sigma =
      cfg.blur_sigma_range.first + (cfg.blur_sigma_range.second - cfg.blur_sigma_range.first) * unit(rng);

  cv::Mat out = image.clone();
  if (zoom != 1.0) {
    const double cx = (out.cols - 1) / 2.0;
    const double cy = (out.rows - 1) / 2.0;
    cv::Mat m = (cv::Mat_<double>(2, 3) << zoom, 0, (1 - zoom) * cx, 0, zoom, (1 - zoom) * cy);
    cv::Mat warped;
    cv::warpAffine(out, warped, m, out.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
    out = warped;
  }
  if (flip) cv::flip(out, out, 1);
  if (sigma > 0.0) cv::GaussianBlur(out, out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  if (cfg.noise_stddev > 0.0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_stddev));
    for (int r = 0; r < out.rows; ++r) {
      float* row = out.ptr<float>(r);
      for (int i = 0; i < out.cols * 3; ++i) row[i] += noise(rng);
    }
  }
  cv::min(out, 1.0, out);
  cv::max(out, 0.0, out);
  return out;
}

}  // namespace vmmc
