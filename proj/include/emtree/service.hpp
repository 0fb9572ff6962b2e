#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

#include "emtree/agent.hpp"
#include "emtree/builder.hpp"
#include "emtree/events.hpp"
#include "emtree/forgetting.hpp"
#include "emtree/lm.hpp"
#include "emtree/rules.hpp"

namespace emtree {

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() const = 0;
  // Lets a virtual clock follow the event stream; wall clocks ignore it.
  virtual void observe(Timestamp) {}
};

class SystemClock : public Clock {
 public:
  Timestamp now() const override;
};

// Starts at `start` and only moves when told to or when it observes a later event.
class VirtualClock : public Clock {
 public:
  explicit VirtualClock(Timestamp start = {}) : now_(start.seconds) {}
  Timestamp now() const override { return {now_.load()}; }
  void observe(Timestamp t) override { advance_to(t); }
  void advance_to(Timestamp t);
  void set(Timestamp t) { now_ = t.seconds; }

 private:
  std::atomic<std::int64_t> now_;
};

struct ServiceConfig {
  BuilderConfig builder;
  std::size_t batch_cap = 64;
  bool forgetting = true;
  bool relevance = true;            // relevance estimation during sweeps
  bool rules_for_forgetting = true;  // learned rules reach relevance estimation
  bool rules_for_summaries = true;   // learned rules reach grouping and summarizing
  bool sweep_after_commit = true;    // only when the queue is empty afterwards
  std::optional<std::size_t> sweep_call_budget;
  std::optional<int> nightly_hour;            // clock hour for the nightly sweep
  std::optional<Duration> idle_sweep_after;   // sweep after this long without input
  std::filesystem::path snapshot_dir;         // empty: snapshots stay in memory only
  std::size_t keep_snapshots = 5;
  QaMode qa_mode = QaMode::tree;
  AgentConfig agent;
};

struct LagMetrics {
  std::uint64_t received = 0;
  std::uint64_t processed = 0;
  std::uint64_t pending = 0;  // queued plus in-flight
  Duration delay{0};          // age of the oldest pending record
  std::uint64_t version = 0;
  std::size_t sweeps = 0;
  std::size_t interrupted_sweeps = 0;
};

class MemoryService {
 public:
  MemoryService(std::shared_ptr<LmGateway> gateway, ServiceConfig config, std::shared_ptr<Clock> clock,
                std::vector<std::string> seed_rules = {});
  ~MemoryService();

  MemoryService(const MemoryService&) = delete;
  MemoryService& operator=(const MemoryService&) = delete;

  // Background worker: applies queued batches and runs sweeps.
  void start();
  void stop();
  bool running() const { return worker_.joinable(); }

  // Queues one record and returns the queue depth. Throws InvalidEvent for malformed or
  // out-of-order records. Interrupts a running sweep.
  std::size_t ingest(const EventRecord& record);

  // Processes everything queued on the calling thread (worker must not be running).
  void drain();
  // Sweeps the live tree now on the calling thread (worker must not be running).
  SweepReport sweep_now();
  // Blocks until the worker has nothing queued or in flight.
  void wait_idle();

  std::shared_ptr<const HistoryTree> latest_snapshot() const;
  // Recent snapshots are kept in memory, older ones are read from the snapshot directory.
  std::shared_ptr<const HistoryTree> snapshot(std::uint64_t version) const;

  LagMetrics lag_metrics() const;

  QaResult ask(std::string_view question);
  RuleSetPtr feedback(std::string_view text);

  RuleStore& rules() { return rules_; }
  LmGateway& gateway() { return *gateway_; }
  const ServiceConfig& config() const { return config_; }
  Clock& clock() { return *clock_; }
  const std::vector<SweepReport>& sweep_log() const { return sweep_log_; }  // calling thread only
  UpdateTrace last_trace() const;
  void set_trace_hook(std::function<void(const UpdateTrace&, const HistoryTree& before)> hook);

 private:
  struct Pending {
    EventRecord record;
    Timestamp arrived;
  };

  void worker_loop();
  // Applies at most one batch; returns false when nothing was queued.
  bool apply_batch();
  SweepReport run_sweep();
  void publish();
  bool sweep_due(Timestamp now);

  std::shared_ptr<LmGateway> gateway_;
  ServiceConfig config_;
  std::shared_ptr<Clock> clock_;
  RuleStore rules_;
  TreeBuilder builder_;
  ForgettingEngine forgetting_;

  HistoryTree tree_;  // owned by whichever thread processes (worker or drain caller)
  std::vector<SweepReport> sweep_log_;
  std::function<void(const UpdateTrace&, const HistoryTree&)> trace_hook_;

  mutable std::mutex mutex_;  // queue, counters, snapshots
  std::condition_variable wake_;
  std::condition_variable idle_;
  std::deque<Pending> queue_;
  std::optional<Timestamp> last_accepted_;
  std::size_t in_flight_ = 0;
  std::optional<Timestamp> in_flight_arrival_;
  std::uint64_t received_ = 0;
  std::uint64_t processed_ = 0;
  std::size_t sweeps_ = 0;
  std::size_t interrupted_sweeps_ = 0;
  bool busy_ = false;
  bool stopping_ = false;
  bool dirty_since_sweep_ = false;
  Timestamp last_input_;
  std::optional<std::int64_t> last_nightly_day_;
  UpdateTrace last_trace_;
  std::shared_ptr<const HistoryTree> latest_;
  std::map<std::uint64_t, std::shared_ptr<const HistoryTree>> recent_;

  std::atomic<bool> interrupt_{false};
  std::thread worker_;
};

}  // namespace emtree
