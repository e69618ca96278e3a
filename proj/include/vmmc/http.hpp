#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <thread>

#include <opencv2/core.hpp>

#include "vmmc/annotation.hpp"
#include "vmmc/classifier.hpp"
#include "vmmc/fraudwatch.hpp"

namespace httplib {
class Server;
}

namespace vmmc {

// Owns an HTTP server that can run on a background thread or block the caller.
class HttpService {
 public:
  HttpService();
  virtual ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  // Binds (port 0 picks a free one), starts serving in the background, returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  bool listen(const std::string& host, int port);
  void stop();

 protected:
  httplib::Server& http() { return *server_; }

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

// GET /review/next, POST /review/{id}, GET /review/stats, GET /review/items,
// GET /review/image/{id}.
class ReviewServer final : public HttpService {
 public:
  ReviewServer(AnnotationStore& store, std::filesystem::path image_root);

 private:
  AnnotationStore& store_;
  std::filesystem::path image_root_;
};

using VehicleClassifier = std::function<ClassScores(const cv::Mat& frame)>;

// POST /observe, POST /registry, GET /registry, GET /verdicts?status=, GET /stats.
class FraudServer final : public HttpService {
 public:
  FraudServer(FraudWatch& watch, PlateReader& reader, VehicleClassifier classifier = {});

 private:
  FraudWatch& watch_;
  PlateReader& reader_;
  VehicleClassifier classifier_;
};

}  // namespace vmmc
