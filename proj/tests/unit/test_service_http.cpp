#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "emtree/harness.hpp"
#include "emtree/http_api.hpp"
#include "emtree/service.hpp"
#include "emtree/tree_io.hpp"
#include "fixtures.hpp"

using namespace emtree;
using namespace emtree::test;
using std::chrono::hours;
using std::chrono::seconds;

namespace {

ServiceConfig quiet_config() {
  ServiceConfig cfg;
  cfg.forgetting = false;
  return cfg;
}

std::vector<EventRecord> stream(int n, Timestamp start) {
  const std::vector<std::string> actions{"GoTo(Sink_1)", "Pickup(Knife_1)", "GoTo(CounterTop_1)",
                                         "Place(Knife_1, CounterTop_1)", "LookAround"};
  std::vector<EventRecord> out;
  for (int i = 0; i < n; ++i) out.push_back(scene_event(start + seconds(20 * i), actions[static_cast<std::size_t>(i) % actions.size()]));
  return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

template <typename Pred>
bool eventually(Pred pred, std::chrono::milliseconds limit = std::chrono::milliseconds(5000)) {
  const auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return pred();
}

}  // namespace

TEST(Service, FirstRecordQueuesAtDepthOne) {
  MemoryService svc(scripted_gateway(), quiet_config(), std::make_shared<VirtualClock>(at(9)));
  EXPECT_EQ(svc.ingest(scene_event(at(9), "GoTo(Sink_1)")), 1u);
  EXPECT_EQ(svc.lag_metrics().pending, 1u);
  svc.drain();
  EXPECT_EQ(svc.latest_snapshot()->version, 1u);
  EXPECT_EQ(svc.lag_metrics().processed, 1u);
}

TEST(Service, RejectsOlderAndMalformedRecords) {
  MemoryService svc(scripted_gateway(), quiet_config(), std::make_shared<VirtualClock>(at(9)));
  svc.ingest(scene_event(at(10), "GoTo(Sink_1)"));
  EXPECT_THROW(svc.ingest(scene_event(at(9), "GoTo(Sink_1)")), InvalidEvent);
  EventRecord speech;
  speech.at = at(11);
  speech.kind = EventKind::speech;
  EXPECT_THROW(svc.ingest(speech), InvalidEvent);
  EXPECT_EQ(svc.lag_metrics().received, 1u);
}

namespace {

std::vector<std::uint64_t> burst_batches(std::size_t cap) {
  auto backend = std::make_shared<GatedBackend>();
  auto cfg = quiet_config();
  cfg.batch_cap = cap;
  MemoryService svc(std::make_shared<LmGateway>(backend), cfg, std::make_shared<VirtualClock>(at(9)));
  std::vector<std::uint64_t> processed_after_commit;
  svc.set_trace_hook([&](const UpdateTrace&, const HistoryTree&) {
    processed_after_commit.push_back(svc.lag_metrics().processed);
  });
  const auto events = stream(101, at(9));
  backend->close();
  svc.start();
  svc.ingest(events[0]);
  backend->wait_for_waiter();
  EXPECT_EQ(svc.latest_snapshot()->version, 0u);
  for (std::size_t i = 1; i < events.size(); ++i) svc.ingest(events[i]);
  const auto lag = svc.lag_metrics();
  EXPECT_EQ(lag.pending, 101u);
  EXPECT_EQ(lag.received, lag.processed + lag.pending);
  backend->open();
  svc.wait_idle();
  svc.stop();
  return processed_after_commit;
}

}  // namespace

TEST(Service, BurstDuringUpdateBecomesCappedBatches) {
  EXPECT_EQ(burst_batches(64), (std::vector<std::uint64_t>{1, 65, 101}));
  EXPECT_EQ(burst_batches(128), (std::vector<std::uint64_t>{1, 101}));
}

TEST(Service, DelayTracksOldestPendingRecord) {
  auto clock = std::make_shared<VirtualClock>(at(9));
  MemoryService svc(scripted_gateway(), quiet_config(), clock);
  EXPECT_EQ(svc.lag_metrics().delay, Duration{0});
  for (const auto& e : stream(5, at(9))) svc.ingest(e);
  const auto last = at(9) + seconds(80);
  clock->advance_to(last + seconds(30));
  auto lag = svc.lag_metrics();
  EXPECT_EQ(lag.pending, 5u);
  // The first record arrived when the clock read 09:00.
  EXPECT_EQ(lag.delay, seconds(110));
  svc.drain();
  lag = svc.lag_metrics();
  EXPECT_EQ(lag.pending, 0u);
  EXPECT_EQ(lag.delay, Duration{0});
}

TEST(Service, SweepWaitsForEmptyQueue) {
  ServiceConfig cfg;
  cfg.batch_cap = 64;
  MemoryService svc(scripted_gateway(), cfg, std::make_shared<VirtualClock>(at(9)));
  for (const auto& e : stream(100, at(9))) svc.ingest(e);
  svc.drain();
  EXPECT_EQ(svc.lag_metrics().processed, 100u);
  EXPECT_EQ(svc.sweep_log().size(), 1u);
}

TEST(Service, NightlySweepOncePerDay) {
  ServiceConfig cfg;
  cfg.sweep_after_commit = false;
  cfg.nightly_hour = 3;
  auto clock = std::make_shared<VirtualClock>(at(9));
  MemoryService svc(scripted_gateway(), cfg, clock);
  for (const auto& e : stream(10, at(9))) svc.ingest(e);
  svc.drain();
  EXPECT_EQ(svc.lag_metrics().sweeps, 0u);
  clock->advance_to(at(3, 5, 0, 25));
  svc.start();
  EXPECT_TRUE(eventually([&] { return svc.lag_metrics().sweeps == 1; }));
  std::this_thread::sleep_for(std::chrono::milliseconds(600));
  EXPECT_EQ(svc.lag_metrics().sweeps, 1u);
  svc.stop();
  // Scenes and events from the morning before are expired; the goal lasts a full day.
  const auto snap = svc.latest_snapshot();
  EXPECT_GT(count_nodes(*snap, 2), 0u);
  EXPECT_EQ(count_nodes(*snap, 0), count_nodes(*snap, 2));
}

TEST(Service, IdleSweep) {
  ServiceConfig cfg;
  cfg.sweep_after_commit = false;
  cfg.idle_sweep_after = hours(2);
  auto clock = std::make_shared<VirtualClock>(at(9));
  MemoryService svc(scripted_gateway(), cfg, clock);
  svc.start();
  for (const auto& e : stream(5, at(9))) svc.ingest(e);
  svc.wait_idle();
  std::this_thread::sleep_for(std::chrono::milliseconds(400));
  EXPECT_EQ(svc.lag_metrics().sweeps, 0u);
  clock->advance_to(at(11, 30));
  EXPECT_TRUE(eventually([&] { return svc.lag_metrics().sweeps == 1; }));
  svc.stop();
}

TEST(Service, SnapshotFilesKeepNewest) {
  const auto dir = fresh_dir("emtree_snapshots_test");
  auto cfg = quiet_config();
  cfg.snapshot_dir = dir;
  cfg.keep_snapshots = 5;
  std::uint64_t latest = 0;
  std::uint64_t latest_hash = 0;
  {
    MemoryService svc(scripted_gateway(), cfg, std::make_shared<VirtualClock>(at(9)));
    for (const auto& e : stream(8, at(9))) {
      svc.ingest(e);
      svc.drain();
    }
    latest = svc.latest_snapshot()->version;
    latest_hash = structural_hash(*svc.latest_snapshot());
    EXPECT_EQ(latest, 8u);
    EXPECT_TRUE(svc.snapshot(latest - 4));
    EXPECT_FALSE(svc.snapshot(1));
  }
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& f : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 5u);
  MemoryService reopened(scripted_gateway(), cfg, std::make_shared<VirtualClock>(at(9)));
  const auto loaded = reopened.snapshot(latest);
  ASSERT_TRUE(loaded);
  EXPECT_EQ(structural_hash(*loaded), latest_hash);
  std::filesystem::remove_all(dir);
}

TEST(Service, FeedbackAndAsk) {
  MemoryService svc(std::make_shared<LmGateway>(std::make_shared<ScriptedBackend>(household_scripted_config())),
                    quiet_config(), std::make_shared<VirtualClock>(at(9)));
  for (const auto& e : stream(10, at(9))) svc.ingest(e);
  svc.drain();
  const auto rules = svc.feedback("You should always remember when you pick up a knife.");
  EXPECT_EQ(rules->version, 1u);
  const auto r = svc.ask("When did you pick up a knife?");
  EXPECT_EQ(r.snapshot_version, svc.latest_snapshot()->version);
  EXPECT_NE(r.answer.find("2024/04/24 09:0"), std::string::npos) << r.trace_lines();
}

class Http : public ::testing::Test {
 protected:
  void SetUp() override {
    service_ = std::make_unique<MemoryService>(
        std::make_shared<LmGateway>(std::make_shared<ScriptedBackend>(household_scripted_config())), quiet_config(),
        std::make_shared<VirtualClock>(at(9)));
    service_->start();
    api_ = std::make_unique<HttpApi>(*service_);
    port_ = api_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    api_->stop();
    service_->stop();
  }

  httplib::Result post(const std::string& path, const std::string& body) {
    return client_->Post(path, body, "application/json");
  }

  std::unique_ptr<MemoryService> service_;
  std::unique_ptr<HttpApi> api_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

TEST_F(Http, EventsTreeAndMetrics) {
  std::string body;
  for (const auto& e : stream(10, at(9))) body += serialize_event(e) + "\n";
  auto res = post("/events", body);
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 202);
  EXPECT_EQ(nlohmann::json::parse(res->body)["accepted"], 10);
  service_->wait_idle();

  res = client_->Get("/tree");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto tree = parse_tree(res->body);
  EXPECT_EQ(std::to_string(tree.version), res->get_header_value("X-Tree-Version"));
  EXPECT_EQ(count_nodes(tree, 0) - count_nodes(tree, 1), 10u);

  res = client_->Get("/tree?version=" + std::to_string(tree.version));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(client_->Get("/tree?version=999")->status, 404);
  EXPECT_EQ(client_->Get("/tree?version=abc")->status, 400);

  res = client_->Get("/metrics");
  ASSERT_TRUE(res);
  const auto m = nlohmann::json::parse(res->body);
  EXPECT_EQ(m["received"], 10);
  EXPECT_EQ(m["processed"].get<int>() + m["pending"].get<int>(), 10);
  EXPECT_TRUE(m["usage"].contains("grouping"));
  EXPECT_EQ(client_->Get("/health")->status, 200);
}

TEST_F(Http, EventErrors) {
  EXPECT_EQ(post("/events", "not json")->status, 400);
  EXPECT_EQ(post("/events", "")->status, 400);
  EXPECT_EQ(post("/events", R"({"at": "2024/04/24 09:00:00", "kind": "speech", "attributes": {}})")->status, 400);
  EXPECT_EQ(post("/events", serialize_event(scene_event(at(10), "LookAround")))->status, 202);
  const auto res = post("/events", serialize_event(scene_event(at(9), "LookAround")));
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(nlohmann::json::parse(res->body)["accepted"], 0);
}

TEST_F(Http, AskFeedbackRules) {
  std::string body;
  for (const auto& e : stream(10, at(9))) body += serialize_event(e) + "\n";
  post("/events", body);
  service_->wait_idle();

  auto res = post("/ask", R"({"text": "When did you pick up a knife?"})");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto qa = nlohmann::json::parse(res->body);
  EXPECT_NE(qa["answer"].get<std::string>().find("09:0"), std::string::npos);
  EXPECT_FALSE(qa["trace"].empty());
  EXPECT_EQ(post("/ask", "{}")->status, 400);
  EXPECT_EQ(post("/ask", R"({"text": "  "})")->status, 400);

  res = post("/feedback", R"({"text": "Remember the apples."})");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body)["version"], 1);
  EXPECT_EQ(post("/feedback", "[]")->status, 400);

  res = client_->Get("/rules");
  const auto rules = nlohmann::json::parse(res->body);
  ASSERT_EQ(rules["rules"].size(), 1u);
  EXPECT_EQ(rules["rules"][0]["text"], "Remember the apples.");
  EXPECT_EQ(rules["history"].size(), 1u);
}
