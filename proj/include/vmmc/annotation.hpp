#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vmmc/dataset.hpp"
#include "vmmc/ssd.hpp"

namespace vmmc {

struct AnnotationConfig {
  double certain_size = 0.10;  // box area / image area
  double detector_confidence_threshold = 0.5;
  int class_id = 0;

  void validate() const;
};

struct AnnotationRow {
  std::string image_path;
  int class_id = 0;
  BoundingBox bbox;  // pixels
  Source source = Source::auto_detected;

  ImageRecord to_record() const;
  bool operator==(const AnnotationRow&) const = default;
};

enum class ReviewStatus { pending, labeled, deleted };

std::string to_string(ReviewStatus s);

struct ReviewItem {
  std::string id;
  std::string image_path;
  std::optional<DetectionCandidate> best_candidate;
  ReviewStatus status = ReviewStatus::pending;
  std::optional<int> assigned_class;
  std::optional<BoundingBox> assigned_bbox;
  int suggested_class = 0;  // class of the folder the image came from
  std::string note;
};

nlohmann::json to_json(const ReviewItem& item);
ReviewItem review_item_from_json(const nlohmann::json& j);

struct AnnotationResult {
  std::vector<AnnotationRow> rows;
  std::vector<ReviewItem> queue;
};

// Thrown when the detector fails; carries everything annotated before the failure.
class AnnotationAborted : public std::runtime_error {
 public:
  AnnotationAborted(const std::string& what, AnnotationResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const AnnotationResult& partial() const { return partial_; }

 private:
  AnnotationResult partial_;
};

// Largest-area candidate at or above the confidence threshold.
std::optional<DetectionCandidate> largest_candidate(const std::vector<DetectionCandidate>& candidates,
                                                    double confidence_threshold);

// Image paths are made relative to root for the rows and review items.
AnnotationResult auto_annotate(const std::vector<std::filesystem::path>& images, const std::filesystem::path& root,
                               const CarDetector& detector, const AnnotationConfig& cfg);

struct Decision {
  enum class Action { label, remove };
  Action action = Action::label;
  int class_id = 0;
  std::optional<BoundingBox> bbox;

  static Decision label(int class_id, BoundingBox bbox) { return {Action::label, class_id, bbox}; }
  static Decision remove() { return {Action::remove, 0, std::nullopt}; }
};

// {"action":"label","class_id":k,"bbox":[x0,y0,x1,y1]} or {"action":"delete"}.
Decision decision_from_json(const nlohmann::json& j);

class InvalidTransition : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// pending -> labeled | deleted. Any other starting state throws InvalidTransition.
ReviewItem apply_decision(ReviewItem item, const Decision& decision);

struct ReviewStats {
  std::size_t pending = 0;
  std::size_t labeled = 0;
  std::size_t deleted = 0;
  std::size_t auto_rows = 0;
  std::size_t human_rows = 0;
};

nlohmann::json to_json(const ReviewStats& s);

// Rows plus the review queue of an annotation campaign. All members are serialized
// by one mutex; persist_path, when set, is rewritten after every mutation.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path root = {});
  AnnotationStore(AnnotationStore&& other) noexcept;
  AnnotationStore& operator=(AnnotationStore&&) = delete;

  const std::filesystem::path& root() const { return root_; }
  void add(AnnotationResult result);

  // Oldest pending item not leased to another caller; leases it.
  std::optional<ReviewItem> next_pending();
  std::optional<ReviewItem> item(const std::string& id) const;

  // Applies a decision to a queued item, or corrects an auto row addressed by its
  // "row-" id. A repeated idempotency key returns the first outcome unchanged.
  ReviewItem decide(const std::string& id, const Decision& decision, const std::string& idempotency_key = {});

  std::vector<AnnotationRow> rows() const;
  std::vector<ReviewItem> items() const;
  ReviewStats stats() const;
  std::size_t mutations() const;

  void set_lease(std::chrono::steady_clock::duration lease) { lease_ = lease; }
  void set_persist_path(std::filesystem::path path);

  // Manifest-format CSV of every row.
  std::string csv() const;
  void export_csv(const std::filesystem::path& path) const;

  nlohmann::json to_json() const;
  static AnnotationStore from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static AnnotationStore load(const std::filesystem::path& path);

 private:
  void persist_locked() const;
  nlohmann::json to_json_locked() const;
  std::string csv_locked() const;

  std::filesystem::path root_;
  std::filesystem::path persist_path_;
  mutable std::mutex mutex_;
  std::vector<AnnotationRow> rows_;
  std::vector<std::string> row_ids_;
  std::vector<ReviewItem> items_;
  std::map<std::string, std::size_t> item_index_;
  std::map<std::string, std::chrono::steady_clock::time_point> leases_;
  std::map<std::string, ReviewItem> idempotent_;
  std::chrono::steady_clock::duration lease_ = std::chrono::seconds(120);
  std::size_t next_id_ = 1;
  std::size_t mutations_ = 0;
};

// One auto_annotate pass per (folder, class id) pair in order; folders must not share images.
AnnotationStore run_campaign(const std::vector<std::pair<std::filesystem::path, int>>& classes,
                             const std::filesystem::path& root, const CarDetector& detector,
                             AnnotationConfig cfg = {});

// Image files directly under dir, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace vmmc
