#include "emtree/config.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

namespace emtree {

namespace {

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string{"config key '"} + key + "': " + e.what());
  }
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string{where} + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

BuilderConfig builder_config_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"max_depth", "lifetimes_minutes", "cluster_gap_factor", "visibility_factor", "push_prevention_factor",
              "domain_levels", "interaction_actions", "root_summary"},
             "builder config");
  BuilderConfig c;
  take(j, "max_depth", c.max_depth);
  if (j.contains("lifetimes_minutes")) {
    std::vector<std::int64_t> minutes;
    take(j, "lifetimes_minutes", minutes);
    c.lifetimes.clear();
    for (const auto m : minutes) c.lifetimes.push_back(std::chrono::minutes(m));
  }
  take(j, "cluster_gap_factor", c.cluster_gap_factor);
  take(j, "visibility_factor", c.visibility_factor);
  take(j, "push_prevention_factor", c.push_prevention_factor);
  take(j, "domain_levels", c.domain_levels);
  take(j, "interaction_actions", c.interaction_actions);
  take(j, "root_summary", c.root_summary);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ServiceConfig service_config_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"builder", "batch_cap", "forgetting", "relevance", "rules_for_forgetting", "rules_for_summaries",
              "sweep_after_commit", "sweep_call_budget", "nightly_hour", "idle_sweep_minutes", "snapshot_dir",
              "keep_snapshots", "qa_mode", "max_steps"},
             "service config");
  ServiceConfig c;
  if (j.contains("builder")) c.builder = builder_config_from_json(j["builder"]);
  take(j, "batch_cap", c.batch_cap);
  take(j, "forgetting", c.forgetting);
  take(j, "relevance", c.relevance);
  take(j, "rules_for_forgetting", c.rules_for_forgetting);
  take(j, "rules_for_summaries", c.rules_for_summaries);
  take(j, "sweep_after_commit", c.sweep_after_commit);
  if (j.contains("sweep_call_budget")) {
    std::size_t budget = 0;
    take(j, "sweep_call_budget", budget);
    c.sweep_call_budget = budget;
  }
  if (j.contains("nightly_hour")) {
    int hour = 0;
    take(j, "nightly_hour", hour);
    if (hour < 0 || hour > 23) throw ConfigError("nightly_hour must be within 0..23");
    c.nightly_hour = hour;
  }
  if (j.contains("idle_sweep_minutes")) {
    std::int64_t minutes = 0;
    take(j, "idle_sweep_minutes", minutes);
    c.idle_sweep_after = std::chrono::minutes(minutes);
  }
  std::string dir;
  take(j, "snapshot_dir", dir);
  c.snapshot_dir = dir;
  take(j, "keep_snapshots", c.keep_snapshots);
  std::string mode = "tree";
  take(j, "qa_mode", mode);
  if (mode == "flat") {
    c.qa_mode = QaMode::flat;
  } else if (mode != "tree") {
    throw ConfigError("qa_mode must be \"tree\" or \"flat\"");
  }
  take(j, "max_steps", c.agent.max_steps);
  if (c.batch_cap == 0) throw ConfigError("batch_cap must be positive");
  return c;
}

HttpBackendConfig http_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"endpoint", "model", "api_key", "temperature", "timeout_seconds", "max_retries", "retry_backoff_ms"},
             "lm config");
  HttpBackendConfig c;
  take(j, "endpoint", c.endpoint);
  take(j, "model", c.model);
  take(j, "api_key", c.api_key);
  take(j, "temperature", c.temperature);
  take(j, "timeout_seconds", c.timeout_seconds);
  take(j, "max_retries", c.max_retries);
  take(j, "retry_backoff_ms", c.retry_backoff_ms);
  const auto env = HttpBackendConfig::from_env();
  if (!env.endpoint.empty()) c.endpoint = env.endpoint;
  if (!env.model.empty()) c.model = env.model;
  if (!env.api_key.empty()) c.api_key = env.api_key;
  return c;
}

EvalSpec eval_spec_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"seeds", "seed_count", "variants", "episodes", "qa_pairs", "gap_hours", "threads", "episode_files",
              "builder", "batch_cap", "model_judge", "report", "details", "max_steps"},
             "eval config");
  EvalSpec s;
  take(j, "seeds", s.seeds);
  if (j.contains("seed_count")) {
    int n = 0;
    take(j, "seed_count", n);
    for (int i = 1; i <= n; ++i) s.seeds.push_back(static_cast<std::uint64_t>(i));
  }
  if (s.seeds.empty()) s.seeds = {1};
  take(j, "variants", s.variants);
  for (const auto& v : s.variants) {
    try {
      variant_by_name(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  take(j, "episodes", s.harness.generator.episodes);
  take(j, "qa_pairs", s.harness.qa_pairs);
  if (j.contains("gap_hours")) {
    std::vector<int> gap;
    take(j, "gap_hours", gap);
    if (gap.size() != 2 || gap[0] < 0 || gap[1] < gap[0]) throw ConfigError("gap_hours must be [min, max]");
    s.harness.generator.gap_hours_min = gap[0];
    s.harness.generator.gap_hours_max = gap[1];
  }
  take(j, "threads", s.threads);
  std::vector<std::string> files;
  take(j, "episode_files", files);
  s.episode_files.assign(files.begin(), files.end());
  if (j.contains("builder")) s.harness.builder = builder_config_from_json(j["builder"]);
  take(j, "batch_cap", s.harness.batch_cap);
  take(j, "model_judge", s.harness.model_judge);
  take(j, "max_steps", s.harness.agent.max_steps);
  std::string report, details;
  take(j, "report", report);
  take(j, "details", details);
  s.report = report;
  s.details = details;
  return s;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace emtree
