// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 when any fails.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "../unit/fixtures.hpp"
#include "emtree/forgetting.hpp"
#include "emtree/harness.hpp"
#include "emtree/http_api.hpp"
#include "emtree/log.hpp"
#include "emtree/service.hpp"
#include "emtree/tree_io.hpp"

using namespace emtree;
using namespace emtree::test;
using Stopwatch = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Stopwatch::time_point t0) {
  return std::chrono::duration<double>(Stopwatch::now() - t0).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

unsigned workers() { return std::max(1u, std::min(8u, std::thread::hardware_concurrency())); }

void walk(const TreeNode& n, const std::function<void(const TreeNode&)>& fn) {
  fn(n);
  for (const auto& c : n.children) walk(c, fn);
}

// ---- 1 ------------------------------------------------------------------------

Outcome expiration_math() {
  const auto t0 = Stopwatch::now();
  std::mt19937_64 rng(101);
  auto pick = [&](std::int64_t lo, std::int64_t hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng); };
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    BuilderConfig cfg;
    cfg.lifetimes.clear();
    const auto n = pick(1, 6);
    for (int k = 0; k < n; ++k) cfg.lifetimes.push_back(Duration{pick(1, 7 * 24 * 3600)});
    const int level = static_cast<int>(pick(0, 12));
    const Timestamp end{pick(1'600'000'000, 1'900'000'000)};
    const auto dt = cfg.lifetimes[static_cast<std::size_t>(std::min<std::int64_t>(level, n - 1))].count();
    const std::int64_t gamma = level <= 3 ? 1 : std::int64_t{1} << (level - 3);
    const Timestamp expected{end.seconds + dt * gamma};
    if (initial_expiration(level, end, cfg) != expected) ++mismatches;
  }
  const auto secs = seconds_since(t0);
  return {mismatches == 0 && secs < 1.0, fmt("1000 cases, %d mismatches, %.3fs", mismatches, secs)};
}

// ---- 2 ------------------------------------------------------------------------

bool normal_form(const TreeNode& n) {
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    const auto& c = n.children[i];
    if (c.placeholder && !c.children.empty()) return false;
    if (i > 0 && c.placeholder && n.children[i - 1].placeholder) return false;
    if (!normal_form(c)) return false;
  }
  return true;
}

Outcome pure_decay_oracle() {
  const auto t0 = Stopwatch::now();
  std::mt19937_64 rng(202);
  int hash_mismatch = 0, form = 0, survivors_expired = 0, forgotten_total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto tree = random_tree(rng, {.depth = 6, .max_nodes = 200});
    const auto now = at(8) + std::chrono::minutes(static_cast<int>(rng() % (72 * 60)));

    // Brute force: expired nodes with no expired ancestor.
    std::set<NodeId> expired;
    std::function<void(const TreeNode&)> collect = [&](const TreeNode& n) {
      for (const auto& c : n.children) {
        if (is_expired(c, now)) {
          expired.insert(c.id);
        } else {
          collect(c);
        }
      }
    };
    collect(tree.root);
    forgotten_total += static_cast<int>(expired.size());

    auto actual = tree;
    ForgettingEngine(nullptr, {}).sweep(actual, now, {}, nullptr, {.use_relevance = false});
    auto expected = tree;
    pure_decay(expected.root, now);
    if (structural_hash(actual.root) != structural_hash(expected.root)) ++hash_mismatch;
    if (!normal_form(actual.root) || !check_invariants(actual).empty()) ++form;
    // Every brute-force-expired node is gone or a placeholder; nothing else was forgotten.
    std::set<NodeId> placeholders_before, placeholders_after, live_after;
    walk(tree.root, [&](const TreeNode& n) { if (n.placeholder) placeholders_before.insert(n.id); });
    walk(actual.root, [&](const TreeNode& n) {
      if (n.placeholder) {
        placeholders_after.insert(n.id);
      } else if (n.level < actual.max_depth) {
        live_after.insert(n.id);
        if (is_expired(n, now)) ++survivors_expired;
      }
    });
    for (const auto id : expired) {
      if (live_after.count(id)) ++survivors_expired;
    }
    for (const auto id : placeholders_after) {
      if (!expired.count(id) && !placeholders_before.count(id)) ++hash_mismatch;
    }
  }
  const auto secs = seconds_since(t0);
  return {hash_mismatch == 0 && form == 0 && survivors_expired == 0 && secs < 10.0,
          fmt("200 trees, %d expired subtrees, %d mismatches, %d normal-form violations, %d expired survivors, %.2fs",
              forgotten_total, hash_mismatch, form, survivors_expired, secs)};
}

// ---- 3 ------------------------------------------------------------------------

int dominance_violations(const TreeNode& n, bool is_root) {
  int v = 0;
  if (!is_root && !n.children.empty()) {
    bool any_forever = false;
    Timestamp latest{};
    for (const auto& c : n.children) {
      any_forever = any_forever || c.never_expires;
      latest = std::max(latest, c.expiration);
    }
    if (any_forever && !n.never_expires) ++v;
    if (!n.never_expires && n.expiration < latest) ++v;
  }
  for (const auto& c : n.children) v += dominance_violations(c, false);
  return v;
}

Outcome parent_dominance() {
  ScriptedConfig sc = household_scripted_config();
  sc.rules.push_back({PromptKind::relevance_estimation, "Pickup\\((Knife|Egg)", "Relevance: inf"});
  sc.rules.push_back({PromptKind::relevance_estimation, "Place\\(", "Relevance: 3"});
  sc.rules.push_back({PromptKind::relevance_estimation, "GoTo\\(", "Relevance: 0.5"});
  GeneratorConfig g;
  g.episodes = 12;
  g.gap_hours_min = 0;
  g.gap_hours_max = 30;
  int violations = 0, sweeps = 0, forgotten = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto history = synthesize_history(seed, g);
    auto gw = scripted_gateway(sc);
    TreeBuilder builder(*gw, {});
    ForgettingEngine engine(gw.get(), {});
    HistoryTree tree(builder.config().max_depth);
    std::mt19937_64 rng(seed);
    std::size_t next = 0;
    RuleSet rules;
    rules.rules = {{"You should always remember when you pick up a knife."}};
    for (int update = 0; update < 50 && next < history.events.size(); ++update) {
      const auto n = std::min<std::size_t>(1 + rng() % 6, history.events.size() - next);
      std::vector<SceneInstant> batch;
      for (std::size_t i = 0; i < n; ++i) batch.push_back(to_scene(history.events[next + i]));
      next += n;
      builder.update_tree(tree, batch);
      const auto now = batch.back().at + Duration{static_cast<std::int64_t>(rng() % (8 * 3600))};
      const auto report = engine.sweep(tree, now, rules);
      forgotten += static_cast<int>(report.forgotten);
      ++sweeps;
      violations += dominance_violations(tree.root, true);
    }
  }
  return {violations == 0 && forgotten > 0,
          fmt("%d sweeps over 10 runs of 50 updates, %d nodes forgotten, %d violations", sweeps, forgotten, violations)};
}

// ---- 4, 5, 6 ---------------------------------------------------------------------

std::vector<std::uint64_t> twenty_seeds() {
  std::vector<std::uint64_t> s;
  for (std::uint64_t i = 1; i <= 20; ++i) s.push_back(i);
  return s;
}

struct Matrix {
  std::map<std::string, std::vector<ExperimentReport>> by_variant;
  std::map<std::string, double> seconds;
};

Matrix& matrix() {
  static Matrix m = [] {
    Matrix out;
    HarnessConfig cfg;
    for (const auto* name : {"A", "B", "F", "G"}) {
      const auto t0 = Stopwatch::now();
      out.by_variant[name] = run_matrix({variant_by_name(name)}, twenty_seeds(), cfg, workers());
      out.seconds[name] = seconds_since(t0);
    }
    return out;
  }();
  return m;
}

std::optional<double> mean_rate(const std::vector<ExperimentReport>& reports, int round) {
  double sum = 0;
  int n = 0;
  for (const auto& r : reports) {
    if (const auto f = r.forgetting_rate(round)) sum += *f, ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

Outcome two_round() {
  auto& m = matrix();
  const auto a1 = mean_rate(m.by_variant["A"], 1), a2 = mean_rate(m.by_variant["A"], 2);
  const auto b1 = mean_rate(m.by_variant["B"], 1), b2 = mean_rate(m.by_variant["B"], 2);
  const double secs = m.seconds["A"] + m.seconds["B"];
  const bool ok = a1 && a2 && b1 && b2 && *a1 == 100.0 && *a2 < 100.0 && *b1 == 100.0 && *b2 == 100.0 && secs < 120;
  return {ok, fmt("learning FR1=%.1f FR2=%.1f, no learning FR1=%.1f FR2=%.1f, 20 seeds, %.1fs", a1.value_or(-1),
                  a2.value_or(-1), b1.value_or(-1), b2.value_or(-1), secs)};
}

Outcome memory_reduction() {
  auto& m = matrix();
  const auto& a = m.by_variant["A"];
  const auto& f = m.by_variant["F"];
  int smaller = 0;
  double sum_a = 0, sum_f = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    smaller += a[i].final_nodes < f[i].final_nodes;
    sum_a += static_cast<double>(a[i].final_nodes);
    sum_f += static_cast<double>(f[i].final_nodes);
  }
  const double share = 100.0 * smaller / static_cast<double>(a.size());
  const double reduction = sum_f > 0 ? 100.0 * (1.0 - sum_a / sum_f) : 0;
  const double secs = m.seconds["A"] + m.seconds["F"];
  return {share >= 95.0 && reduction >= 30.0 && secs < 300,
          fmt("N_f %.1f vs %.1f, smaller in %.0f%% of runs, mean reduction %.1f%%, %.1fs", sum_a / a.size(),
              sum_f / f.size(), share, reduction, secs)};
}

Outcome query_cost() {
  auto& m = matrix();
  const auto& a = m.by_variant["A"];
  const auto& g = m.by_variant["G"];
  int cheaper = 0;
  double qa_a = 0, qa_g = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cheaper += a[i].cost_per_question() < g[i].cost_per_question();
    qa_a += a[i].cost_per_question();
    qa_g += g[i].cost_per_question();
  }
  const double share = 100.0 * cheaper / static_cast<double>(a.size());
  return {share >= 90.0, fmt("tokens per question %.0f online vs %.0f offline incl. build, cheaper in %.0f%% of runs",
                             qa_a / a.size(), qa_g / g.size(), share)};
}

// ---- 7 ------------------------------------------------------------------------

struct FrontierCount {
  int updates = 0;
  int checked = 0;
  int violations = 0;
};

void replay_frontier(const ScriptedConfig& sc, BuilderConfig bc, std::uint64_t seed, FrontierCount& count) {
  GeneratorConfig g;
  g.episodes = 30;
  g.gap_hours_min = 0;
  g.gap_hours_max = 20;
  auto history = synthesize_history(seed, g);
  history.events.resize(std::min<std::size_t>(history.events.size(), 500));
  auto gw = scripted_gateway(sc);
  TreeBuilder builder(*gw, bc);
  HistoryTree tree(bc.max_depth);
  std::mt19937_64 rng(seed);
  for (std::size_t next = 0; next < history.events.size();) {
    const auto n = std::min<std::size_t>(1 + rng() % 12, history.events.size() - next);
    std::vector<SceneInstant> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(to_scene(history.events[next + i]));
    next += n;
    const auto before = tree;
    const auto trace = builder.update_tree(tree, batch);
    ++count.updates;
    for (const auto& lt : trace.levels) {
      if (lt.prevent_push) continue;
      walk(before.root, [&](const TreeNode& node) {
        if (node.level != lt.level + 1 || node.level >= before.max_depth || !(node.span.end < lt.cutoff)) return;
        ++count.checked;
        const auto* after = tree.find(node.id);
        if (after == nullptr || structural_hash(*after) != structural_hash(node)) ++count.violations;
      });
    }
  }
}

Outcome frontier_stability() {
  FrontierCount count;
  ScriptedConfig grouping_model;
  grouping_model.grouping = GroupingPolicy::append_to_latest;
  ScriptedConfig merging_model;
  merging_model.grouping = GroupingPolicy::merge_all;
  BuilderConfig prompt_levels;
  prompt_levels.domain_levels = false;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    replay_frontier(household_scripted_config(), {}, seed, count);
    replay_frontier(grouping_model, prompt_levels, seed, count);
    replay_frontier(merging_model, prompt_levels, seed, count);
  }
  return {count.violations == 0 && count.checked > 0,
          fmt("9 replays of 500 events, %d updates, %d frozen nodes checked, %d modified", count.updates,
              count.checked, count.violations)};
}

// ---- 8 ------------------------------------------------------------------------

std::vector<EventRecord> scene_stream(int n, Timestamp start) {
  const std::vector<std::string> actions{"GoTo(Sink_1)", "Pickup(Knife_1)", "GoTo(CounterTop_1)",
                                         "Place(Knife_1, CounterTop_1)", "LookAround", "Open(Fridge_1)"};
  std::vector<EventRecord> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(scene_event(start + std::chrono::seconds(15 * i), actions[static_cast<std::size_t>(i) % actions.size()]));
  }
  return out;
}

std::string paused_read() {
  auto backend = std::make_shared<GatedBackend>(household_scripted_config());
  ServiceConfig cfg;
  cfg.forgetting = false;
  MemoryService svc(std::make_shared<LmGateway>(backend), cfg, std::make_shared<VirtualClock>(at(9)));
  HttpApi api(svc);
  const int port = api.start();
  svc.start();
  const auto events = scene_stream(40, at(9));
  for (int i = 0; i < 20; ++i) svc.ingest(events[static_cast<std::size_t>(i)]);
  svc.wait_idle();
  const auto committed = svc.latest_snapshot();
  backend->close();
  for (int i = 20; i < 40; ++i) svc.ingest(events[static_cast<std::size_t>(i)]);
  backend->wait_for_waiter();
  httplib::Client client("127.0.0.1", port);
  const auto res = client.Get("/tree");
  std::string problem;
  if (!res || res->status != 200) {
    problem = "GET /tree failed";
  } else if (res->get_header_value("X-Tree-Version") != std::to_string(committed->version) ||
             res->body != serialize_tree(*committed)) {
    problem = "GET /tree during update returned version " + res->get_header_value("X-Tree-Version") +
              ", expected " + std::to_string(committed->version);
  }
  backend->open();
  svc.wait_idle();
  if (problem.empty() && svc.latest_snapshot()->version <= committed->version) problem = "update never committed";
  svc.stop();
  api.stop();
  return problem;
}

std::string sweep_interrupt() {
  // Extended nodes survive, so the sweep keeps descending and asking.
  auto sc = household_scripted_config();
  sc.rules.push_back({PromptKind::relevance_estimation, ".*", "Relevance: 1000"});
  auto gw = scripted_gateway(sc);
  ServiceConfig cfg;
  cfg.sweep_after_commit = false;
  auto clock = std::make_shared<VirtualClock>(at(9));
  MemoryService svc(gw, cfg, clock);
  for (const auto& e : scene_stream(60, at(9))) svc.ingest(e);
  svc.drain();
  clock->advance_to(at(9, 0, 0, 27));
  int calls = 0, after_ingest = 0;
  bool ingested = false;
  gw->set_before_call([&](const LmRequest& req) {
    if (req.kind != PromptKind::relevance_estimation) return;
    if (ingested) ++after_ingest;
    if (++calls == 3 && !ingested) {
      ingested = true;
      svc.ingest(scene_event(at(9, 0, 0, 27), "GoTo(Sink_1)"));
    }
  });
  const auto report = svc.sweep_now();
  gw->set_before_call(nullptr);
  if (!ingested) return "sweep made fewer than 3 relevance calls";
  if (!report.interrupted) return "sweep not interrupted";
  // The call during which the record arrived finishes; no further call may start.
  if (after_ingest != 0) return fmt("%d relevance calls after the ingest", after_ingest);
  if (report.calls != 3) return fmt("sweep reports %zu calls, expected 3", report.calls);
  return {};
}

std::string lag_consistency() {
  auto backend = std::make_shared<GatedBackend>(household_scripted_config());
  ServiceConfig cfg;
  cfg.batch_cap = 16;
  MemoryService svc(std::make_shared<LmGateway>(backend), cfg, std::make_shared<VirtualClock>(at(9)));
  svc.start();
  const auto events = scene_stream(1500, at(9));
  std::atomic<bool> done{false};
  std::thread producer([&] {
    std::mt19937_64 rng(9);
    for (const auto& e : events) {
      svc.ingest(e);
      if (rng() % 4 == 0) std::this_thread::sleep_for(std::chrono::microseconds(rng() % 400));
    }
    done = true;
  });
  std::mt19937_64 rng(10);
  int bad = 0, observed = 0;
  std::uint64_t last_processed = 0;
  while (observed < 1000) {
    const auto lag = svc.lag_metrics();
    if (lag.received != lag.processed + lag.pending || lag.processed < last_processed) ++bad;
    last_processed = lag.processed;
    ++observed;
    // Pause the model now and then so observations also land mid-update.
    if (observed % 100 == 50) {
      backend->close();
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
      const auto paused = svc.lag_metrics();
      if (paused.received != paused.processed + paused.pending) ++bad;
      backend->open();
    }
    std::this_thread::sleep_for(std::chrono::microseconds(rng() % 300));
  }
  producer.join();
  svc.wait_idle();
  const auto end = svc.lag_metrics();
  svc.stop();
  if (bad) return fmt("%d of %d observations inconsistent", bad, observed);
  if (end.processed != events.size() || end.pending != 0) return "not all records processed";
  return {};
}

Outcome service_contract() {
  std::string problems;
  for (const auto& [name, fn] : std::vector<std::pair<std::string, std::function<std::string()>>>{
           {"paused read", paused_read}, {"sweep interrupt", sweep_interrupt}, {"lag counters", lag_consistency}}) {
    const auto p = fn();
    if (!p.empty()) problems += (problems.empty() ? "" : "; ") + name + ": " + p;
  }
  if (problems.empty()) {
    return {true, "GET /tree served the committed version mid-update, sweep stopped before its next call, "
                  "1000 lag observations consistent"};
  }
  return {false, problems};
}

// ---- 9 ------------------------------------------------------------------------

Outcome determinism() {
  HarnessConfig cfg;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  auto run = [&] {
    const auto reports = run_matrix(standard_variants(), seeds, cfg, workers());
    return report_tsv(aggregate(reports)) + details_tsv(reports);
  };
  const auto first = run();
  const auto second = run();
  return {first == second && !first.empty(),
          fmt("%zu variants x %zu seeds, %zu bytes, %s", standard_variants().size(), seeds.size(), first.size(),
              first == second ? "identical" : "different")};
}

}  // namespace

int main() {
  logger()->set_level(spdlog::level::err);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"expiration-math", expiration_math},
      {"pure-decay-oracle", pure_decay_oracle},
      {"parent-dominance", parent_dominance},
      {"two-round-forgetting", two_round},
      {"memory-reduction", memory_reduction},
      {"query-cost", query_cost},
      {"frontier-stability", frontier_stability},
      {"service-contract", service_contract},
      {"determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string{"exception: "} + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
