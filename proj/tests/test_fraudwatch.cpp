#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "vmmc/fraudwatch.hpp"

using namespace vmmc;
namespace fs = std::filesystem;

TEST(Plate, Normalization) {
  EXPECT_EQ(normalize_plate("16 ABC 123"), "16ABC123");
  EXPECT_EQ(normalize_plate("16-abc.123"), "16ABC123");
  EXPECT_EQ(normalize_plate(" - "), "");
}

TEST(Registry, UpsertOutcomes) {
  Registry r;
  const auto first = r.upsert("16 ABC 123", 2);
  EXPECT_EQ(first.entry.plate, "16ABC123");
  EXPECT_EQ(first.outcome, UpsertOutcome::inserted);
  EXPECT_EQ(r.upsert("16abc123", 2).outcome, UpsertOutcome::unchanged);
  const auto replaced = r.upsert("16-ABC-123", 4);
  EXPECT_EQ(replaced.outcome, UpsertOutcome::replaced);
  EXPECT_EQ(replaced.previous_class, 2);
  EXPECT_EQ(r.size(), 1u);
  EXPECT_EQ(r.find("16 abc 123")->class_id, 4);
  EXPECT_THROW(r.upsert("--", 1), std::invalid_argument);
  EXPECT_THROW(r.upsert("X1", 7), std::invalid_argument);
}

TEST(Registry, SnapshotsAreStable) {
  Registry r;
  r.upsert("A1", 0);
  const auto before = r.snapshot();
  r.upsert("A1", 3);
  r.upsert("B2", 1);
  EXPECT_EQ(before->at("A1"), 0);
  EXPECT_EQ(before->size(), 1u);
  EXPECT_EQ(r.snapshot()->at("A1"), 3);
}

TEST(Registry, CsvRoundTrip) {
  const fs::path path = fs::temp_directory_path() / "vmmc_registry.csv";
  Registry r;
  r.upsert("34 XYZ 99", 2);
  r.upsert("06 ab 1", 6);
  r.save_csv(path);
  Registry back;
  back.upsert("STALE", 0);
  back.load_csv(path);
  EXPECT_EQ(*back.snapshot(), *r.snapshot());
  std::ofstream(path) << "plate,class_id\nX1,9\n";
  EXPECT_THROW(back.load_csv(path), std::runtime_error);
  EXPECT_EQ(back.size(), 2u);
}

TEST(Verdict, TruthTableIsTotal) {
  for (const auto& c : fixture::fraud_truth_table()) {
    const Verdict v = fixture::run_fraud_case(c);
    EXPECT_EQ(v.status, c.expected) << c.plate_known << c.class_match << c.confident;
    if (v.status == VerdictStatus::fraud) {
      ASSERT_TRUE(v.matched_entry);
      EXPECT_NE(v.matched_entry->class_id, v.top_class);
    }
  }
}

TEST(Verdict, ExamplesAndNormalizedLookup) {
  Registry r;
  r.upsert("16ABC123", 2);
  const auto snap = r.snapshot();
  EXPECT_EQ(evaluate({"16ABC123", fixture::peaked(2, 0.98), "", ""}, *snap).status, VerdictStatus::authorized);
  const Verdict fraud = evaluate({"16 abc 123", fixture::peaked(5, 0.97), "", ""}, *snap);
  EXPECT_EQ(fraud.status, VerdictStatus::fraud);
  EXPECT_EQ(fraud.top_class, 5);
  EXPECT_DOUBLE_EQ(fraud.top_prob, 0.97);
  EXPECT_EQ(fraud.matched_entry->plate, "16ABC123");
  EXPECT_EQ(evaluate({"99ZZZ1", fixture::peaked(2, 0.98), "", ""}, *snap).status, VerdictStatus::unregistered);
  EXPECT_EQ(evaluate({"16ABC123", fixture::peaked(5, 0.97), "", ""}, *snap, 0.99).status,
            VerdictStatus::low_confidence);
  EXPECT_THROW(evaluate({"16ABC123", ClassScores{}, "", ""}, *snap), std::invalid_argument);
  EXPECT_THROW(evaluate({" ", fixture::peaked(1, 0.9), "", ""}, *snap), std::invalid_argument);
}

TEST(Verdict, ReplayIsDeterministic) {
  Registry r;
  r.upsert("A1", 1);
  r.upsert("B2", 3);
  const std::vector<Observation> log{{"A1", fixture::peaked(1, 0.9), "t0", "c"},
                                     {"B2", fixture::peaked(1, 0.9), "t1", "c"},
                                     {"C3", fixture::peaked(0, 0.5), "t2", "c"}};
  const auto snap = r.snapshot();
  for (const auto& o : log) {
    EXPECT_EQ(to_json(evaluate(o, *snap)), to_json(evaluate(observation_from_json(to_json(o)), *snap)));
  }
}

TEST(PlateReader, SidecarAndFilename) {
  const fs::path dir = fs::temp_directory_path() / "vmmc_plates";
  fs::create_directories(dir);
  std::ofstream(dir / "frame1.png.plate") << "16ABC123\n";
  StubPlateReader reader;
  EXPECT_EQ(reader.read(dir / "frame1.png"), "16ABC123");
  EXPECT_EQ(reader.read(dir / "cam_plate-34XYZ99_0007.jpg"), "34XYZ99");
  EXPECT_EQ(reader.read(dir / "nothing.jpg"), std::nullopt);
}

TEST(FraudWatch, FrameRoundTripAndAudit) {
  const fs::path audit = fs::temp_directory_path() / "vmmc_audit.jsonl";
  fs::remove(audit);
  Registry registry;
  AuditLog log(audit);
  FraudWatch watch(registry, log);
  watch.register_plate("16 ABC 123", 2);
  watch.register_plate("16ABC123", 3);
  StubPlateReader reader;
  const auto v = watch.observe_frame(reader, "gate_plate-16ABC123.jpg", fixture::peaked(2, 0.95), "gate");
  ASSERT_TRUE(v);
  EXPECT_EQ(v->status, VerdictStatus::fraud);
  EXPECT_EQ(v->observation.plate, "16ABC123");
  EXPECT_EQ(v->observation.camera_id, "gate");
  EXPECT_EQ(v->observation.predicted.probs(), fixture::peaked(2, 0.95).probs());
  EXPECT_FALSE(watch.observe_frame(reader, "blank.jpg", fixture::peaked(2, 0.95), "gate"));
  EXPECT_EQ(watch.skipped(), 1u);
  watch.observe({"16ABC123", fixture::peaked(3, 0.5), "t", "gate"});
  watch.observe({"16ABC123", fixture::peaked(3, 0.5), "t", "gate"});
  EXPECT_EQ(watch.verdicts().size(), 3u);
  EXPECT_EQ(watch.verdicts(VerdictStatus::fraud).size(), 1u);
  const auto events = log.events();
  ASSERT_EQ(events.size(), 6u);
  EXPECT_EQ(events[1]["outcome"], "replaced");
  EXPECT_EQ(events[3]["event"], "skipped");
  EXPECT_EQ(events[5]["low_confidence_repeats"], 2);
  std::ifstream in(audit);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) EXPECT_NO_THROW(nlohmann::json::parse(line));
  EXPECT_EQ(lines, 6u);
}
