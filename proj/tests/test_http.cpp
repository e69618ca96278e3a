#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include <httplib.h>

#include "fixtures.hpp"
#include "vmmc/http.hpp"

using namespace vmmc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vmmc_http_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json post(httplib::Client& c, const std::string& path, const json& body, const std::string& key = {}) {
  httplib::Headers headers;
  if (!key.empty()) headers.emplace("Idempotency-Key", key);
  const auto res = c.Post(path, headers, body.dump(), "application/json");
  EXPECT_TRUE(res);
  json out = res->body.empty() ? json::object() : json::parse(res->body);
  if (out.is_object()) out["_status"] = res->status;
  return out;
}

}  // namespace

TEST(ReviewApi, ScriptedSessionOfTwenty) {
  const fs::path root = scratch("session");
  AnnotationStore store(root);
  store.add(auto_annotate(fixture::write_coded_images(root, std::vector<int>(20, 3)), root,
                          fixture::coded_detector, AnnotationConfig{}));
  ReviewServer server(store, root);
  const int port = server.start();
  httplib::Client c("127.0.0.1", port);

  for (int i = 0; i < 20; ++i) {
    const auto res = c.Get("/review/next");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const json item = json::parse(res->body);
    const std::string id = item["id"];
    const std::string key = "tok-" + id;
    const json body = i < 12 ? json{{"action", "label"}, {"class_id", i % 7}, {"bbox", {1, 2, 30, 40}}}
                             : json{{"action", "delete"}};
    // Every submission is sent twice, as a double click would.
    const json first = post(c, "/review/" + id, body, key);
    const json again = post(c, "/review/" + id, body, key);
    EXPECT_EQ(first["_status"], 200);
    EXPECT_EQ(again["_status"], 200);
    EXPECT_EQ(first["item"], again["item"]);
  }
  EXPECT_EQ(c.Get("/review/next")->status, 204);
  const json stats = json::parse(c.Get("/review/stats")->body);
  EXPECT_EQ(stats["labeled"], 12);
  EXPECT_EQ(stats["deleted"], 8);
  EXPECT_EQ(stats["pending"], 0);
  EXPECT_EQ(stats["human_rows"], 12);
  EXPECT_EQ(store.mutations(), 20u);
  EXPECT_EQ(store.rows().size(), 12u);
  server.stop();
}

TEST(ReviewApi, ConcurrentDoubleSubmit) {
  const fs::path root = scratch("race");
  AnnotationStore store(root);
  store.add(auto_annotate(fixture::write_coded_images(root, {0}), root, fixture::coded_detector, AnnotationConfig{}));
  ReviewServer server(store, root);
  const int port = server.start();
  std::vector<std::thread> clients;
  for (int t = 0; t < 4; ++t) {
    clients.emplace_back([port] {
      httplib::Client c("127.0.0.1", port);
      post(c, "/review/item-1", {{"action", "label"}, {"class_id", 2}, {"bbox", {0, 0, 9, 9}}}, "same");
    });
  }
  for (auto& t : clients) t.join();
  EXPECT_EQ(store.mutations(), 1u);
  EXPECT_EQ(store.rows().size(), 1u);
  server.stop();
}

TEST(ReviewApi, ErrorsAndImages) {
  const fs::path root = scratch("errors");
  AnnotationStore store(root);
  store.add(auto_annotate(fixture::write_coded_images(root, {0}), root, fixture::coded_detector, AnnotationConfig{}));
  ReviewServer server(store, root);
  httplib::Client c("127.0.0.1", server.start());
  EXPECT_EQ(post(c, "/review/item-1", {{"action", "dance"}})["_status"], 400);
  EXPECT_EQ(post(c, "/review/item-9", {{"action", "delete"}})["_status"], 404);
  EXPECT_EQ(post(c, "/review/item-1", {{"action", "delete"}})["_status"], 200);
  const json conflict = post(c, "/review/item-1", {{"action", "delete"}});
  EXPECT_EQ(conflict["_status"], 409);
  EXPECT_EQ(conflict["item"]["status"], "deleted");
  const auto image = c.Get("/review/image/item-1");
  EXPECT_EQ(image->status, 200);
  EXPECT_EQ(image->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(c.Get("/review/image/item-7")->status, 404);
  EXPECT_EQ(json::parse(c.Get("/review/items")->body).size(), 1u);
  server.stop();
}

TEST(FraudApi, ObserveRegistryAndVerdicts) {
  Registry registry;
  AuditLog log;
  FraudWatch watch(registry, log);
  StubPlateReader reader;
  FraudServer server(watch, reader, [](const cv::Mat&) { return fixture::peaked(4, 0.9); });
  httplib::Client c("127.0.0.1", server.start());

  const json reg = post(c, "/registry", {{"plate", "16 abc 123"}, {"class_id", 2}});
  EXPECT_EQ(reg["plate"], "16ABC123");
  EXPECT_EQ(reg["outcome"], "inserted");
  const json batch = post(c, "/registry", json::array({{{"plate", "16ABC123"}, {"class_id", 2}},
                                                       {{"plate", "16ABC123"}, {"class_id", 4}}}));
  EXPECT_EQ(batch[0]["outcome"], "unchanged");
  EXPECT_EQ(batch[1]["previous_class"], 2);
  EXPECT_EQ(post(c, "/registry", {{"plate", "X"}, {"class_id", 12}})["_status"], 400);

  const json authorized = post(c, "/observe", {{"plate", "16-ABC-123"}, {"class_scores", to_json(fixture::peaked(4, 0.95))}});
  EXPECT_EQ(authorized["status"], "authorized");
  const json fraud = post(c, "/observe", {{"plate", "16ABC123"}, {"class_scores", to_json(fixture::peaked(1, 0.95))}});
  EXPECT_EQ(fraud["status"], "fraud");
  EXPECT_EQ(fraud["matched_entry"]["class_id"], 4);

  const fs::path dir = scratch("frames");
  const fs::path vehicle = dir / "car.png";
  cv::imwrite(vehicle.string(), cv::Mat(20, 20, CV_8UC3, cv::Scalar::all(90)));
  const json via_image = post(c, "/observe", {{"plate_image", (dir / "x_plate-16ABC123.png").string()},
                                              {"vehicle_image", vehicle.string()}, {"camera_id", "north"}});
  EXPECT_EQ(via_image["status"], "authorized");
  EXPECT_EQ(via_image["observation"]["camera_id"], "north");
  const json skipped = post(c, "/observe", {{"plate_image", (dir / "blurred.png").string()},
                                            {"vehicle_image", vehicle.string()}});
  EXPECT_EQ(skipped["_status"], 422);
  EXPECT_EQ(post(c, "/observe", {{"plate", "A1"}})["_status"], 400);

  const json frauds = json::parse(c.Get("/verdicts?status=fraud")->body);
  ASSERT_EQ(frauds.size(), 1u);
  EXPECT_EQ(frauds[0]["top_class"], 1);
  EXPECT_EQ(json::parse(c.Get("/verdicts")->body).size(), 3u);
  EXPECT_EQ(c.Get("/verdicts?status=maybe")->status, 400);
  EXPECT_EQ(json::parse(c.Get("/registry")->body).size(), 1u);
  const json stats = json::parse(c.Get("/stats")->body);
  EXPECT_EQ(stats["skipped"], 1);
  EXPECT_EQ(stats["verdicts"]["authorized"], 2);
  server.stop();
}
