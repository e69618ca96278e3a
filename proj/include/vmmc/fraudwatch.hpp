#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vmmc/classifier.hpp"

namespace vmmc {

// Uppercase, separators (anything but letters and digits) removed.
std::string normalize_plate(std::string_view plate);

struct RegistryEntry {
  std::string plate;
  int class_id = 0;

  bool operator==(const RegistryEntry&) const = default;
};

enum class UpsertOutcome { inserted, unchanged, replaced };

struct UpsertResult {
  RegistryEntry entry;
  UpsertOutcome outcome = UpsertOutcome::inserted;
  std::optional<int> previous_class;
};

// Plate -> class bindings. Readers take an immutable snapshot; writers build a new
// map and swap it in.
class Registry {
 public:
  using Snapshot = std::map<std::string, int>;

  Registry();

  UpsertResult upsert(std::string_view plate, int class_id);
  std::shared_ptr<const Snapshot> snapshot() const;
  std::optional<RegistryEntry> find(std::string_view plate) const;
  std::size_t size() const { return snapshot()->size(); }

  // CSV "plate,class_id". load replaces the whole registry in one swap.
  void load_csv(const std::filesystem::path& path);
  void save_csv(const std::filesystem::path& path) const;

 private:
  mutable std::mutex write_mutex_;
  std::shared_ptr<const Snapshot> current_;
};

enum class VerdictStatus { authorized, fraud, unregistered, low_confidence };

std::string to_string(VerdictStatus s);
VerdictStatus parse_verdict_status(std::string_view s);

struct Observation {
  std::string plate;
  ClassScores predicted;
  std::string timestamp;  // ISO 8601, UTC
  std::string camera_id;
};

struct Verdict {
  VerdictStatus status = VerdictStatus::unregistered;
  Observation observation;
  std::optional<RegistryEntry> matched_entry;
  int top_class = 0;
  double top_prob = 0.0;
};

nlohmann::json to_json(const Observation& o);
Observation observation_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Verdict& v);

std::string utc_timestamp();

// low_confidence when top_prob < floor, else unregistered when the plate is unknown,
// else authorized when the registry class equals the top class, else fraud.
Verdict evaluate(const Observation& obs, const Registry::Snapshot& registry, double confidence_floor = 0.8);

class PlateReader {
 public:
  virtual ~PlateReader() = default;
  virtual std::optional<std::string> read(const std::filesystem::path& image) = 0;
};

// Reads "<image>.plate" when present, otherwise a "plate-<TEXT>" token in the file stem.
class StubPlateReader final : public PlateReader {
 public:
  std::optional<std::string> read(const std::filesystem::path& image) override;
};

// Append-only JSON-lines file; an empty path keeps events in memory only.
class AuditLog {
 public:
  explicit AuditLog(std::filesystem::path path = {});
  void append(const nlohmann::json& event);
  std::vector<nlohmann::json> events() const;

 private:
  mutable std::mutex mutex_;
  std::filesystem::path path_;
  std::ofstream out_;
  std::vector<nlohmann::json> events_;
};

class FraudWatch {
 public:
  FraudWatch(Registry& registry, AuditLog& log, double confidence_floor = 0.8);

  Verdict observe(const Observation& obs);
  // Reads the plate first; a reader miss emits no verdict and bumps the skip counter.
  std::optional<Verdict> observe_frame(PlateReader& reader, const std::filesystem::path& plate_image,
                                       const ClassScores& predicted, const std::string& camera_id);
  UpsertResult register_plate(std::string_view plate, int class_id);

  // Newest first; status filters when given.
  std::vector<Verdict> verdicts(std::optional<VerdictStatus> status = std::nullopt) const;
  std::size_t skipped() const { return skipped_; }
  double confidence_floor() const { return floor_; }
  Registry& registry() { return registry_; }

 private:
  Registry& registry_;
  AuditLog& log_;
  double floor_;
  std::atomic<std::size_t> skipped_{0};
  mutable std::mutex mutex_;
  std::vector<Verdict> verdicts_;
  std::map<std::string, std::size_t> low_confidence_repeats_;
};

}  // namespace vmmc
