#include "vmmc/http.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <httplib.h>

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

}  // namespace

HttpService::HttpService() : server_(std::make_unique<httplib::Server>()) {}

HttpService::~HttpService() { stop(); }

int HttpService::start(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

bool HttpService::listen(const std::string& host, int port) { return server_->listen(host, port); }

void HttpService::stop() {
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

ReviewServer::ReviewServer(AnnotationStore& store, fs::path image_root)
    : store_(store), image_root_(std::move(image_root)) {
  auto& s = http();
  s.Get("/review/next", [this](const httplib::Request&, httplib::Response& res) {
    const auto item = store_.next_pending();
    if (!item) {
      res.status = 204;
      return;
    }
    send_json(res, 200, to_json(*item));
  });
  s.Get("/review/stats", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, to_json(store_.stats()));
  });
  s.Get("/review/items", [this](const httplib::Request&, httplib::Response& res) {
    json items = json::array();
    for (const auto& i : store_.items()) items.push_back(to_json(i));
    send_json(res, 200, items);
  });
  s.Get(R"(/review/image/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto item = store_.item(req.matches[1]);
    if (!item) return send_error(res, 404, "no review item " + std::string(req.matches[1]));
    std::ifstream in(image_root_ / item->image_path, std::ios::binary);
    if (!in) return send_error(res, 404, "image not found");
    std::ostringstream bytes;
    bytes << in.rdbuf();
    const std::string ext = fs::path(item->image_path).extension().string();
    res.set_content(bytes.str(), ext == ".png" ? "image/png" : "image/jpeg");
  });
  s.Post(R"(/review/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    Decision decision;
    std::string key = req.get_header_value("Idempotency-Key");
    try {
      const json body = json::parse(req.body);
      decision = decision_from_json(body);
      if (key.empty()) key = body.value("token", std::string());
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    try {
      const ReviewItem updated = store_.decide(id, decision, key);
      send_json(res, 200, {{"item", to_json(updated)}, {"stats", to_json(store_.stats())}});
    } catch (const InvalidTransition& e) {
      json body = {{"error", e.what()}};
      if (const auto item = store_.item(id)) body["item"] = to_json(*item);
      send_json(res, 409, body);
    } catch (const std::out_of_range& e) {
      send_error(res, 404, e.what());
    } catch (const std::exception& e) {
      send_error(res, 400, e.what());
    }
  });
}

FraudServer::FraudServer(FraudWatch& watch, PlateReader& reader, VehicleClassifier classifier)
    : watch_(watch), reader_(reader), classifier_(std::move(classifier)) {
  auto& s = http();
  s.Post("/observe", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    try {
      const std::string camera = body.value("camera_id", std::string());
      ClassScores scores;
      if (body.contains("class_scores")) {
        scores = scores_from_json(body.at("class_scores"));
      } else if (body.contains("vehicle_image")) {
        if (!classifier_) return send_error(res, 400, "no classifier loaded; send class_scores");
        scores = classifier_(read_image(body.at("vehicle_image").get<std::string>()));
      } else {
        return send_error(res, 400, "observation needs class_scores or vehicle_image");
      }
      std::optional<Verdict> verdict;
      if (body.contains("plate")) {
        Observation obs{body.at("plate").get<std::string>(), scores,
                        body.value("timestamp", utc_timestamp()), camera};
        verdict = watch_.observe(obs);
      } else if (body.contains("plate_image")) {
        verdict = watch_.observe_frame(reader_, body.at("plate_image").get<std::string>(), scores, camera);
        if (!verdict) {
          return send_json(res, 422, {{"skipped", true}, {"skipped_total", watch_.skipped()}});
        }
      } else {
        return send_error(res, 400, "observation needs plate or plate_image");
      }
      send_json(res, 200, to_json(*verdict));
    } catch (const std::exception& e) {
      send_error(res, 400, e.what());
    }
  });
  s.Post("/registry", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      const json body = json::parse(req.body);
      const json entries = body.is_array() ? body : json::array({body});
      json out = json::array();
      for (const auto& e : entries) {
        const auto r = watch_.register_plate(e.at("plate").get<std::string>(), e.at("class_id").get<int>());
        const char* outcome = r.outcome == UpsertOutcome::inserted    ? "inserted"
                              : r.outcome == UpsertOutcome::unchanged ? "unchanged"
                                                                      : "replaced";
        json j = {{"plate", r.entry.plate}, {"class_id", r.entry.class_id}, {"outcome", outcome}};
        if (r.previous_class) j["previous_class"] = *r.previous_class;
        out.push_back(j);
      }
      send_json(res, 200, body.is_array() ? out : out.front());
    } catch (const std::exception& e) {
      send_error(res, 400, e.what());
    }
  });
  s.Get("/registry", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& [plate, cls] : *watch_.registry().snapshot()) out.push_back({{"plate", plate}, {"class_id", cls}});
    send_json(res, 200, out);
  });
  s.Get("/verdicts", [this](const httplib::Request& req, httplib::Response& res) {
    std::optional<VerdictStatus> status;
    if (req.has_param("status")) {
      try {
        status = parse_verdict_status(req.get_param_value("status"));
      } catch (const std::exception& e) {
        return send_error(res, 400, e.what());
      }
    }
    json out = json::array();
    for (const auto& v : watch_.verdicts(status)) out.push_back(to_json(v));
    send_json(res, 200, out);
  });
  s.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    json counts = json::object();
    for (auto st : {VerdictStatus::authorized, VerdictStatus::fraud, VerdictStatus::unregistered,
                    VerdictStatus::low_confidence}) {
      counts[to_string(st)] = watch_.verdicts(st).size();
    }
    send_json(res, 200, {{"verdicts", counts}, {"skipped", watch_.skipped()},
                         {"registry_size", watch_.registry().size()},
                         {"confidence_floor", watch_.confidence_floor()}});
  });
}

}  // namespace vmmc
