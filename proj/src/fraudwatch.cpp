#include "vmmc/fraudwatch.hpp"

#include <cctype>
#include <ctime>
#include <sstream>
#include <stdexcept>

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

std::string normalize_plate(std::string_view plate) {
  std::string out;
  for (unsigned char c : plate) {
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::toupper(c)));
  }
  return out;
}

Registry::Registry() : current_(std::make_shared<const Snapshot>()) {}

UpsertResult Registry::upsert(std::string_view plate, int class_id) {
  const std::string key = normalize_plate(plate);
  if (key.empty()) throw std::invalid_argument("registry: empty plate");
  if (!is_valid_class(class_id)) throw std::invalid_argument("registry: unknown class " + std::to_string(class_id));
  std::lock_guard lock(write_mutex_);
  UpsertResult r{{key, class_id}, UpsertOutcome::inserted, std::nullopt};
  const auto current = std::atomic_load(&current_);
  if (const auto it = current->find(key); it != current->end()) {
    if (it->second == class_id) {
      r.outcome = UpsertOutcome::unchanged;
      return r;
    }
    r.outcome = UpsertOutcome::replaced;
    r.previous_class = it->second;
  }
  auto next = std::make_shared<Snapshot>(*current);
  (*next)[key] = class_id;
  std::atomic_store(&current_, std::shared_ptr<const Snapshot>(std::move(next)));
  return r;
}

std::shared_ptr<const Registry::Snapshot> Registry::snapshot() const { return std::atomic_load(&current_); }

std::optional<RegistryEntry> Registry::find(std::string_view plate) const {
  const std::string key = normalize_plate(plate);
  const auto snap = snapshot();
  if (const auto it = snap->find(key); it != snap->end()) return RegistryEntry{key, it->second};
  return std::nullopt;
}

void Registry::load_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read registry " + path.string());
  auto next = std::make_shared<Snapshot>();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line == "plate,class_id")) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected plate,class_id");
    const std::string key = normalize_plate(line.substr(0, comma));
    int cls = -1;
    try {
      cls = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
    }
    if (key.empty() || !is_valid_class(cls)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad registry row");
    }
    (*next)[key] = cls;
  }
  std::lock_guard lock(write_mutex_);
  std::atomic_store(&current_, std::shared_ptr<const Snapshot>(std::move(next)));
}

void Registry::save_csv(const fs::path& path) const {
  const auto snap = snapshot();
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << "plate,class_id\n";
    for (const auto& [plate, cls] : *snap) out << plate << ',' << cls << '\n';
  }
  fs::rename(tmp, path);
}

std::string to_string(VerdictStatus s) {
  switch (s) {
    case VerdictStatus::authorized: return "authorized";
    case VerdictStatus::fraud: return "fraud";
    case VerdictStatus::unregistered: return "unregistered";
    case VerdictStatus::low_confidence: return "low_confidence";
  }
  return "unknown";
}

VerdictStatus parse_verdict_status(std::string_view s) {
  for (auto v : {VerdictStatus::authorized, VerdictStatus::fraud, VerdictStatus::unregistered,
                 VerdictStatus::low_confidence}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown verdict status '" + std::string(s) + "'");
}

json to_json(const Observation& o) {
  return {{"plate", o.plate}, {"class_scores", to_json(o.predicted)}, {"timestamp", o.timestamp},
          {"camera_id", o.camera_id}};
}

Observation observation_from_json(const json& j) {
  Observation o;
  o.plate = j.at("plate").get<std::string>();
  o.predicted = scores_from_json(j.at("class_scores"));
  o.timestamp = j.value("timestamp", utc_timestamp());
  o.camera_id = j.value("camera_id", std::string());
  return o;
}

json to_json(const Verdict& v) {
  json j = {{"status", to_string(v.status)}, {"observation", to_json(v.observation)},
            {"top_class", v.top_class},       {"top_prob", v.top_prob},
            {"matched_entry", nullptr}};
  if (v.matched_entry) j["matched_entry"] = {{"plate", v.matched_entry->plate}, {"class_id", v.matched_entry->class_id}};
  return j;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Verdict evaluate(const Observation& obs, const Registry::Snapshot& registry, double confidence_floor) {
  if (obs.predicted.probs().empty()) throw std::invalid_argument("observation has no class scores");
  if (normalize_plate(obs.plate).empty()) throw std::invalid_argument("observation has an empty plate");
  Verdict v;
  v.observation = obs;
  v.top_class = obs.predicted.top_class();
  v.top_prob = obs.predicted.top_prob();
  const auto it = registry.find(normalize_plate(obs.plate));
  if (it != registry.end()) v.matched_entry = RegistryEntry{it->first, it->second};
  if (v.top_prob < confidence_floor) {
    v.status = VerdictStatus::low_confidence;
  } else if (!v.matched_entry) {
    v.status = VerdictStatus::unregistered;
  } else if (v.matched_entry->class_id == v.top_class) {
    v.status = VerdictStatus::authorized;
  } else {
    v.status = VerdictStatus::fraud;
  }
  return v;
}

std::optional<std::string> StubPlateReader::read(const fs::path& image) {
  const fs::path sidecar = image.string() + ".plate";
  if (std::ifstream in(sidecar); in) {
    std::string line;
    std::getline(in, line);
    if (!normalize_plate(line).empty()) return line;
    return std::nullopt;
  }
  const std::string stem = image.stem().string();
  const auto pos = stem.find("plate-");
  if (pos == std::string::npos) return std::nullopt;
  std::string token = stem.substr(pos + 6);
  token = token.substr(0, token.find('_'));
  if (normalize_plate(token).empty()) return std::nullopt;
  return token;
}

AuditLog::AuditLog(fs::path path) : path_(std::move(path)) {
  if (!path_.empty()) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    out_.open(path_, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open audit log " + path_.string());
  }
}

void AuditLog::append(const json& event) {
  std::lock_guard lock(mutex_);
  events_.push_back(event);
  if (out_.is_open()) out_ << event.dump() << '\n' << std::flush;
}

std::vector<json> AuditLog::events() const {
  std::lock_guard lock(mutex_);
  return events_;
}

FraudWatch::FraudWatch(Registry& registry, AuditLog& log, double confidence_floor)
    : registry_(registry), log_(log), floor_(confidence_floor) {
  if (!(confidence_floor >= 0.0 && confidence_floor <= 1.0)) {
    throw std::invalid_argument("confidence floor must be in [0,1]");
  }
}

Verdict FraudWatch::observe(const Observation& obs) {
  const auto snap = registry_.snapshot();
  Verdict v = evaluate(obs, *snap, floor_);
  json event = {{"event", "verdict"}, {"verdict", to_json(v)}};
  {
    std::lock_guard lock(mutex_);
    if (v.status == VerdictStatus::low_confidence) {
      event["low_confidence_repeats"] = ++low_confidence_repeats_[normalize_plate(obs.plate)];
    }
    verdicts_.push_back(v);
  }
  log_.append(event);
  return v;
}

std::optional<Verdict> FraudWatch::observe_frame(PlateReader& reader, const fs::path& plate_image,
                                                 const ClassScores& predicted, const std::string& camera_id) {
  const auto plate = reader.read(plate_image);
  if (!plate) {
    ++skipped_;
    log_.append({{"event", "skipped"}, {"reason", "plate unreadable"}, {"image", plate_image.string()},
                 {"camera_id", camera_id}, {"timestamp", utc_timestamp()}});
    return std::nullopt;
  }
  return observe({*plate, predicted, utc_timestamp(), camera_id});
}

UpsertResult FraudWatch::register_plate(std::string_view plate, int class_id) {
  const UpsertResult r = registry_.upsert(plate, class_id);
  json event = {{"event", "registry"}, {"plate", r.entry.plate}, {"class_id", r.entry.class_id},
                {"timestamp", utc_timestamp()}};
  switch (r.outcome) {
    case UpsertOutcome::inserted: event["outcome"] = "inserted"; break;
    case UpsertOutcome::unchanged: event["outcome"] = "unchanged"; break;
    case UpsertOutcome::replaced:
      event["outcome"] = "replaced";
      event["previous_class"] = *r.previous_class;
      break;
  }
  log_.append(event);
  return r;
}

std::vector<Verdict> FraudWatch::verdicts(std::optional<VerdictStatus> status) const {
  std::lock_guard lock(mutex_);
  std::vector<Verdict> out;
  for (auto it = verdicts_.rbegin(); it != verdicts_.rend(); ++it) {
    if (!status || it->status == *status) out.push_back(*it);
  }
  return out;
}

}  // namespace vmmc
