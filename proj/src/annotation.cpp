#include "vmmc/annotation.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json box_json(const BoundingBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

BoundingBox box_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 4) throw std::invalid_argument("bbox must have 4 coordinates");
  BoundingBox b{v[0], v[1], v[2], v[3], false};
  if (!b.valid()) throw std::invalid_argument("bbox must satisfy x_min < x_max and y_min < y_max");
  return b;
}

std::string relative_path(const fs::path& image, const fs::path& root) {
  if (root.empty()) return image.generic_string();
  return fs::relative(image, root).generic_string();
}

}  // namespace

void AnnotationConfig::validate() const {
  if (!(certain_size > 0.0 && certain_size <= 1.0)) throw std::invalid_argument("certain_size must be in (0,1]");
  if (!(detector_confidence_threshold >= 0.0 && detector_confidence_threshold <= 1.0)) {
    throw std::invalid_argument("detector confidence threshold must be in [0,1]");
  }
  if (!is_valid_class(class_id)) throw std::invalid_argument("unknown class id " + std::to_string(class_id));
}

ImageRecord AnnotationRow::to_record() const {
  ImageRecord r;
  r.image_path = image_path;
  r.class_id = class_id;
  r.bbox = bbox;
  r.source = source;
  return r;
}

std::string to_string(ReviewStatus s) {
  switch (s) {
    case ReviewStatus::pending: return "pending";
    case ReviewStatus::labeled: return "labeled";
    case ReviewStatus::deleted: return "deleted";
  }
  return "unknown";
}

json to_json(const ReviewItem& item) {
  json j = {{"id", item.id},
            {"image_path", item.image_path},
            {"status", to_string(item.status)},
            {"suggested_class", item.suggested_class},
            {"best_candidate", nullptr},
            {"assigned_class", nullptr},
            {"assigned_bbox", nullptr},
            {"note", item.note}};
  if (item.best_candidate) {
    j["best_candidate"] = {{"bbox", box_json(item.best_candidate->bbox)},
                           {"confidence", item.best_candidate->confidence},
                           {"detector_class", item.best_candidate->detector_class}};
  }
  if (item.assigned_class) j["assigned_class"] = *item.assigned_class;
  if (item.assigned_bbox) j["assigned_bbox"] = box_json(*item.assigned_bbox);
  return j;
}

ReviewItem review_item_from_json(const json& j) {
  ReviewItem item;
  item.id = j.at("id");
  item.image_path = j.at("image_path");
  const std::string status = j.at("status");
  if (status == "pending") {
    item.status = ReviewStatus::pending;
  } else if (status == "labeled") {
    item.status = ReviewStatus::labeled;
  } else if (status == "deleted") {
    item.status = ReviewStatus::deleted;
  } else {
    throw std::invalid_argument("unknown review status '" + status + "'");
  }
  item.suggested_class = j.value("suggested_class", 0);
  item.note = j.value("note", std::string());
  if (!j.at("best_candidate").is_null()) {
    const auto& c = j.at("best_candidate");
    item.best_candidate = DetectionCandidate{box_from_json(c.at("bbox")), c.at("confidence"), c.at("detector_class")};
  }
  if (!j.at("assigned_class").is_null()) item.assigned_class = j.at("assigned_class").get<int>();
  if (!j.at("assigned_bbox").is_null()) item.assigned_bbox = box_from_json(j.at("assigned_bbox"));
  return item;
}

std::optional<DetectionCandidate> largest_candidate(const std::vector<DetectionCandidate>& candidates,
                                                    double confidence_threshold) {
  std::optional<DetectionCandidate> best;
  for (const auto& c : candidates) {
    if (c.detector_class != "car" || c.confidence < confidence_threshold || !(c.bbox.area() > 0.0)) continue;
    if (!best || c.bbox.area() > best->bbox.area()) best = c;
  }
  return best;
}

AnnotationResult auto_annotate(const std::vector<fs::path>& images, const fs::path& root, const CarDetector& detector,
                               const AnnotationConfig& cfg) {
  cfg.validate();
  AnnotationResult result;
  for (const fs::path& path : images) {
    const std::string rel = relative_path(path, root);
    ReviewItem pending;
    pending.image_path = rel;
    pending.suggested_class = cfg.class_id;
    cv::Mat frame;
    try {
      frame = read_image(path);
    } catch (const std::exception& e) {
      pending.note = "unreadable image";
      result.queue.push_back(std::move(pending));
      continue;
    }
    std::vector<DetectionCandidate> candidates;
    try {
      candidates = detector(frame);
    } catch (const std::exception& e) {
      throw AnnotationAborted(std::string("detector failed on ") + rel + ": " + e.what(), std::move(result));
    }
    const auto best = largest_candidate(candidates, cfg.detector_confidence_threshold);
    const double image_area = double(frame.cols) * double(frame.rows);
    if (best && best->bbox.area() >= cfg.certain_size * image_area) {
      result.rows.push_back({rel, cfg.class_id, best->bbox, Source::auto_detected});
    } else {
      pending.best_candidate = best;
      pending.note = best ? "car below certain size" : "no car detected";
      result.queue.push_back(std::move(pending));
    }
  }
  return result;
}

Decision decision_from_json(const json& j) {
  const std::string action = j.at("action");
  if (action == "delete") return Decision::remove();
  if (action != "label") throw std::invalid_argument("action must be 'label' or 'delete'");
  const int cls = j.at("class_id");
  if (!is_valid_class(cls)) throw std::invalid_argument("unknown class id " + std::to_string(cls));
  return Decision::label(cls, box_from_json(j.at("bbox")));
}

ReviewItem apply_decision(ReviewItem item, const Decision& decision) {
  if (item.status != ReviewStatus::pending) {
    throw InvalidTransition("review item " + item.id + " is already " + to_string(item.status));
  }
  if (decision.action == Decision::Action::remove) {
    item.status = ReviewStatus::deleted;
    return item;
  }
  if (!is_valid_class(decision.class_id)) throw std::invalid_argument("unknown class id");
  if (!decision.bbox || !decision.bbox->valid()) throw std::invalid_argument("label decision needs a valid bbox");
  item.status = ReviewStatus::labeled;
  item.assigned_class = decision.class_id;
  item.assigned_bbox = decision.bbox;
  return item;
}

json to_json(const ReviewStats& s) {
  return {{"pending", s.pending}, {"labeled", s.labeled}, {"deleted", s.deleted},
          {"auto_rows", s.auto_rows}, {"human_rows", s.human_rows}};
}

AnnotationStore::AnnotationStore(fs::path root) : root_(std::move(root)) {}

AnnotationStore::AnnotationStore(AnnotationStore&& other) noexcept {
  std::lock_guard lock(other.mutex_);
  root_ = std::move(other.root_);
  persist_path_ = std::move(other.persist_path_);
  rows_ = std::move(other.rows_);
  row_ids_ = std::move(other.row_ids_);
  items_ = std::move(other.items_);
  item_index_ = std::move(other.item_index_);
  leases_ = std::move(other.leases_);
  idempotent_ = std::move(other.idempotent_);
  lease_ = other.lease_;
  next_id_ = other.next_id_;
  mutations_ = other.mutations_;
}

void AnnotationStore::add(AnnotationResult result) {
  std::lock_guard lock(mutex_);
  std::set<std::string> seen;
  for (const auto& r : rows_) seen.insert(r.image_path);
  for (const auto& i : items_) seen.insert(i.image_path);
  for (const auto& r : result.rows) {
    if (!seen.insert(r.image_path).second) throw std::invalid_argument("image annotated twice: " + r.image_path);
  }
  for (const auto& i : result.queue) {
    if (!seen.insert(i.image_path).second) throw std::invalid_argument("image annotated twice: " + i.image_path);
  }
  for (auto& r : result.rows) {
    rows_.push_back(std::move(r));
    row_ids_.push_back("row-" + std::to_string(next_id_++));
  }
  for (auto& i : result.queue) {
    i.id = "item-" + std::to_string(next_id_++);
    item_index_[i.id] = items_.size();
    items_.push_back(std::move(i));
  }
  persist_locked();
}

std::optional<ReviewItem> AnnotationStore::next_pending() {
  std::lock_guard lock(mutex_);
  const auto now = std::chrono::steady_clock::now();
  for (const auto& item : items_) {
    if (item.status != ReviewStatus::pending) continue;
    const auto lease = leases_.find(item.id);
    if (lease != leases_.end() && lease->second > now) continue;
    leases_[item.id] = now + lease_;
    return item;
  }
  return std::nullopt;
}

std::optional<ReviewItem> AnnotationStore::item(const std::string& id) const {
  std::lock_guard lock(mutex_);
  if (const auto it = item_index_.find(id); it != item_index_.end()) return items_[it->second];
  return std::nullopt;
}

ReviewItem AnnotationStore::decide(const std::string& id, const Decision& decision, const std::string& key) {
  std::lock_guard lock(mutex_);
  if (!key.empty()) {
    if (const auto it = idempotent_.find(key); it != idempotent_.end()) {
      if (it->second.id != id) throw std::invalid_argument("idempotency key reused for another item");
      return it->second;
    }
  }
  ReviewItem updated;
  if (const auto it = item_index_.find(id); it != item_index_.end()) {
    ReviewItem& item = items_[it->second];
    updated = apply_decision(item, decision);
    if (updated.status == ReviewStatus::labeled) {
      rows_.push_back({item.image_path, *updated.assigned_class, *updated.assigned_bbox, Source::human});
      row_ids_.push_back("row-" + std::to_string(next_id_++));
    }
    item = updated;
    leases_.erase(id);
  } else {
    const auto row = std::find(row_ids_.begin(), row_ids_.end(), id);
    if (row == row_ids_.end()) throw std::out_of_range("no review item or row " + id);
    const std::size_t r = static_cast<std::size_t>(row - row_ids_.begin());
    ReviewItem correction;
    correction.id = "item-" + std::to_string(next_id_++);
    correction.image_path = rows_[r].image_path;
    correction.suggested_class = rows_[r].class_id;
    correction.note = "correction of " + id;
    updated = apply_decision(correction, decision);
    if (updated.status == ReviewStatus::labeled) {
      rows_[r] = {rows_[r].image_path, *updated.assigned_class, *updated.assigned_bbox, Source::human};
    } else {
      rows_.erase(rows_.begin() + static_cast<std::ptrdiff_t>(r));
      row_ids_.erase(row_ids_.begin() + static_cast<std::ptrdiff_t>(r));
      item_index_[updated.id] = items_.size();
      items_.push_back(updated);
    }
  }
  ++mutations_;
  if (!key.empty()) idempotent_[key] = updated;
  persist_locked();
  return updated;
}

std::vector<AnnotationRow> AnnotationStore::rows() const {
  std::lock_guard lock(mutex_);
  return rows_;
}

std::vector<ReviewItem> AnnotationStore::items() const {
  std::lock_guard lock(mutex_);
  return items_;
}

ReviewStats AnnotationStore::stats() const {
  std::lock_guard lock(mutex_);
  ReviewStats s;
  for (const auto& i : items_) {
    switch (i.status) {
      case ReviewStatus::pending: ++s.pending; break;
      case ReviewStatus::labeled: ++s.labeled; break;
      case ReviewStatus::deleted: ++s.deleted; break;
    }
  }
  for (const auto& r : rows_) ++(r.source == Source::human ? s.human_rows : s.auto_rows);
  return s;
}

std::size_t AnnotationStore::mutations() const {
  std::lock_guard lock(mutex_);
  return mutations_;
}

void AnnotationStore::set_persist_path(fs::path path) {
  std::lock_guard lock(mutex_);
  persist_path_ = std::move(path);
  persist_locked();
}

std::string AnnotationStore::csv_locked() const {
  DatasetManifest m(root_);
  for (const auto& r : rows_) m.add(r.to_record());
  return format_manifest(m);
}

std::string AnnotationStore::csv() const {
  std::lock_guard lock(mutex_);
  return csv_locked();
}

void AnnotationStore::export_csv(const fs::path& path) const {
  const std::string text = csv();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json AnnotationStore::to_json_locked() const {
  json rows = json::array();
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    rows.push_back({{"id", row_ids_[i]},
                    {"image_path", rows_[i].image_path},
                    {"class_id", rows_[i].class_id},
                    {"bbox", box_json(rows_[i].bbox)},
                    {"source", to_string(rows_[i].source)}});
  }
  json items = json::array();
  for (const auto& i : items_) items.push_back(vmmc::to_json(i));
  return {{"root", root_.generic_string()}, {"next_id", next_id_}, {"rows", rows}, {"items", items}};
}

json AnnotationStore::to_json() const {
  std::lock_guard lock(mutex_);
  return to_json_locked();
}

AnnotationStore AnnotationStore::from_json(const json& j) {
  AnnotationStore s(j.value("root", std::string()));
  s.next_id_ = j.at("next_id");
  for (const auto& r : j.at("rows")) {
    s.rows_.push_back({r.at("image_path"), r.at("class_id"), box_from_json(r.at("bbox")),
                       parse_source(r.at("source").get<std::string>())});
    s.row_ids_.push_back(r.at("id"));
  }
  for (const auto& i : j.at("items")) {
    s.item_index_[i.at("id")] = s.items_.size();
    s.items_.push_back(review_item_from_json(i));
  }
  return s;
}

void AnnotationStore::persist_locked() const {
  if (persist_path_.empty()) return;
  const fs::path tmp = persist_path_.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << to_json_locked().dump(1) << '\n';
  }
  fs::rename(tmp, persist_path_);
}

void AnnotationStore::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

AnnotationStore AnnotationStore::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read review store " + path.string());
  return from_json(json::parse(in));
}

std::vector<fs::path> list_images(const fs::path& dir) {
  static const std::set<std::string> extensions = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (extensions.count(ext)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

AnnotationStore run_campaign(const std::vector<std::pair<fs::path, int>>& classes, const fs::path& root,
                             const CarDetector& detector, AnnotationConfig cfg) {
  std::set<fs::path> seen;
  std::vector<std::vector<fs::path>> folders;
  for (const auto& [dir, cls] : classes) {
    folders.push_back(list_images(dir));
    for (const auto& p : folders.back()) {
      if (!seen.insert(fs::weakly_canonical(p)).second) {
        throw std::invalid_argument("image " + p.string() + " appears in more than one class folder");
      }
    }
  }
  AnnotationStore store(root);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    cfg.class_id = classes[i].second;
    store.add(auto_annotate(folders[i], root, detector, cfg));
  }
  return store;
}

}  // namespace vmmc
