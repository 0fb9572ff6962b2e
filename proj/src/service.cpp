#include "emtree/service.hpp"

#include <chrono>
#include <cstdio>

#include "emtree/log.hpp"
#include "emtree/tree_io.hpp"

namespace emtree {

Timestamp SystemClock::now() const {
  const auto since = std::chrono::system_clock::now().time_since_epoch();
  return {std::chrono::duration_cast<std::chrono::seconds>(since).count()};
}

void VirtualClock::advance_to(Timestamp t) {
  auto cur = now_.load();
  while (cur < t.seconds && !now_.compare_exchange_weak(cur, t.seconds)) {
  }
}

namespace {

std::filesystem::path snapshot_path(const std::filesystem::path& dir, std::uint64_t version) {
  char name[40];
  std::snprintf(name, sizeof name, "tree-%012llu.emtree", static_cast<unsigned long long>(version));
  return dir / name;
}

}  // namespace

MemoryService::MemoryService(std::shared_ptr<LmGateway> gateway, ServiceConfig config,
                             std::shared_ptr<Clock> clock, std::vector<std::string> seed_rules)
    : gateway_(std::move(gateway)),
      config_(std::move(config)),
      clock_(std::move(clock)),
      rules_(std::move(seed_rules)),
      builder_(*gateway_, config_.builder),
      forgetting_(gateway_.get(), config_.builder),
      tree_(config_.builder.max_depth) {
  if (config_.batch_cap == 0) throw std::invalid_argument("batch cap must be positive");
  if (!config_.snapshot_dir.empty()) std::filesystem::create_directories(config_.snapshot_dir);
  latest_ = std::make_shared<const HistoryTree>(tree_);
  recent_[tree_.version] = latest_;
  last_input_ = clock_->now();
}

MemoryService::~MemoryService() { stop(); }

void MemoryService::start() {
  if (worker_.joinable()) return;
  {
    std::lock_guard lock(mutex_);
    stopping_ = false;
  }
  worker_ = std::thread([this] { worker_loop(); });
}

void MemoryService::stop() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  interrupt_ = true;
  wake_.notify_all();
  if (worker_.joinable()) worker_.join();
}

std::size_t MemoryService::ingest(const EventRecord& record) {
  validate(record);
  std::size_t depth = 0;
  {
    std::lock_guard lock(mutex_);
    if (last_accepted_ && record.at < *last_accepted_) {
      throw InvalidEvent("event at " + format_timestamp(record.at) + " is older than the last accepted event (" +
                         format_timestamp(*last_accepted_) + ")");
    }
    clock_->observe(record.at);
    const auto arrived = clock_->now();
    queue_.push_back({record, arrived});
    last_accepted_ = record.at;
    last_input_ = arrived;
    ++received_;
    busy_ = true;
    interrupt_ = true;
    depth = queue_.size();
  }
  wake_.notify_all();
  return depth;
}

bool MemoryService::apply_batch() {
  std::vector<SceneInstant> scenes;
  {
    std::lock_guard lock(mutex_);
    if (queue_.empty()) return false;
    const auto n = std::min(config_.batch_cap, queue_.size());
    in_flight_arrival_ = queue_.front().arrived;
    for (std::size_t i = 0; i < n; ++i) {
      scenes.push_back(to_scene(queue_.front().record));
      queue_.pop_front();
    }
    in_flight_ = n;
  }

  builder_.set_summary_rules(config_.rules_for_summaries ? rules_.current() : nullptr);
  std::optional<HistoryTree> before;
  if (trace_hook_) before = tree_;
  UpdateTrace trace;
  try {
    trace = builder_.update_tree(tree_, scenes);
  } catch (const std::exception& e) {
    logger()->error("update of {} events failed: {}", scenes.size(), e.what());
  }
  publish();
  {
    std::lock_guard lock(mutex_);
    processed_ += in_flight_;
    in_flight_ = 0;
    in_flight_arrival_.reset();
    dirty_since_sweep_ = true;
    last_trace_ = trace;
  }
  if (trace_hook_) trace_hook_(trace, *before);
  return true;
}

SweepReport MemoryService::run_sweep() {
  if (!config_.forgetting) return {};
  {
    std::lock_guard lock(mutex_);
    interrupt_ = !queue_.empty();
  }
  const auto rules = config_.rules_for_forgetting ? rules_.current() : std::make_shared<RuleSet>(rules_.seed());
  const auto report = forgetting_.sweep(tree_, clock_->now(), *rules, &interrupt_,
                                        {config_.relevance, config_.sweep_call_budget});
  if (report.changed) publish();
  {
    std::lock_guard lock(mutex_);
    ++sweeps_;
    if (report.interrupted) {
      ++interrupted_sweeps_;
    } else {
      dirty_since_sweep_ = false;
    }
  }
  sweep_log_.push_back(report);
  return report;
}

void MemoryService::publish() {
  auto snap = std::make_shared<const HistoryTree>(tree_);
  std::optional<std::uint64_t> dropped;
  {
    std::lock_guard lock(mutex_);
    latest_ = snap;
    recent_[snap->version] = snap;
    while (recent_.size() > config_.keep_snapshots) {
      dropped = recent_.begin()->first;
      recent_.erase(recent_.begin());
    }
  }
  if (config_.snapshot_dir.empty()) return;
  write_tree_file(*snap, snapshot_path(config_.snapshot_dir, snap->version));
  // Keep the newest files only.
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(config_.snapshot_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("tree-", 0) == 0 && entry.path().extension() == ".emtree") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  while (files.size() > config_.keep_snapshots) {
    std::error_code ec;
    std::filesystem::remove(files.front(), ec);
    files.erase(files.begin());
  }
}

bool MemoryService::sweep_due(Timestamp now) {
  std::lock_guard lock(mutex_);
  if (!queue_.empty()) return false;
  if (config_.nightly_hour) {
    const auto day = now.seconds / 86400;
    if (time_of_day(now) / 3600 == *config_.nightly_hour && last_nightly_day_ != day) {
      last_nightly_day_ = day;
      return true;
    }
  }
  if (config_.idle_sweep_after && dirty_since_sweep_ && now - last_input_ >= *config_.idle_sweep_after) {
    return true;
  }
  return false;
}

void MemoryService::worker_loop() {
  while (true) {
    {
      std::unique_lock lock(mutex_);
      wake_.wait_for(lock, std::chrono::milliseconds(200), [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) break;
    }
    try {
      if (apply_batch()) {
        bool empty = false;
        {
          std::lock_guard lock(mutex_);
          empty = queue_.empty();
        }
        if (empty && config_.sweep_after_commit) run_sweep();
      } else if (sweep_due(clock_->now())) {
        run_sweep();
      }
    } catch (const std::exception& e) {
      logger()->error("worker: {}", e.what());
    }
    {
      std::lock_guard lock(mutex_);
      if (queue_.empty()) busy_ = false;
    }
    idle_.notify_all();
  }
  std::lock_guard lock(mutex_);
  busy_ = false;
  idle_.notify_all();
}

void MemoryService::drain() {
  if (running()) throw std::logic_error("drain() needs the worker to be stopped");
  while (apply_batch()) {
    bool empty = false;
    {
      std::lock_guard lock(mutex_);
      empty = queue_.empty();
    }
    if (empty && config_.sweep_after_commit) run_sweep();
  }
  std::lock_guard lock(mutex_);
  busy_ = false;
}

SweepReport MemoryService::sweep_now() {
  if (running()) throw std::logic_error("sweep_now() needs the worker to be stopped");
  return run_sweep();
}

void MemoryService::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_.wait(lock, [&] { return (queue_.empty() && in_flight_ == 0 && !busy_) || stopping_; });
}

std::shared_ptr<const HistoryTree> MemoryService::latest_snapshot() const {
  std::lock_guard lock(mutex_);
  return latest_;
}

std::shared_ptr<const HistoryTree> MemoryService::snapshot(std::uint64_t version) const {
  {
    std::lock_guard lock(mutex_);
    if (const auto it = recent_.find(version); it != recent_.end()) return it->second;
  }
  if (config_.snapshot_dir.empty()) return nullptr;
  const auto path = snapshot_path(config_.snapshot_dir, version);
  if (!std::filesystem::exists(path)) return nullptr;
  return std::make_shared<const HistoryTree>(read_tree_file(path));
}

LagMetrics MemoryService::lag_metrics() const {
  const auto now = clock_->now();
  std::lock_guard lock(mutex_);
  LagMetrics m;
  m.received = received_;
  m.processed = processed_;
  m.pending = queue_.size() + in_flight_;
  std::optional<Timestamp> oldest = in_flight_arrival_;
  if (!oldest && !queue_.empty()) oldest = queue_.front().arrived;
  if (oldest && now > *oldest) m.delay = now - *oldest;
  m.version = latest_->version;
  m.sweeps = sweeps_;
  m.interrupted_sweeps = interrupted_sweeps_;
  return m;
}

QaResult MemoryService::ask(std::string_view question) {
  const auto snap = latest_snapshot();
  return answer_question(*gateway_, *snap, question, clock_->now(), config_.qa_mode, config_.agent);
}

RuleSetPtr MemoryService::feedback(std::string_view text) {
  return rules_.learn_from_feedback(*gateway_, text, clock_->now());
}

UpdateTrace MemoryService::last_trace() const {
  std::lock_guard lock(mutex_);
  return last_trace_;
}

void MemoryService::set_trace_hook(std::function<void(const UpdateTrace&, const HistoryTree&)> hook) {
  trace_hook_ = std::move(hook);
}

}  // namespace emtree
