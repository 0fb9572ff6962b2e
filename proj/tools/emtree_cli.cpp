#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "emtree/agent.hpp"
#include "emtree/config.hpp"
#include "emtree/harness.hpp"
#include "emtree/http_api.hpp"
#include "emtree/log.hpp"
#include "emtree/scripted.hpp"
#include "emtree/service.hpp"
#include "emtree/tree_io.hpp"

using namespace emtree;

namespace {

struct Options {
  std::string config;
  std::string backend = "scripted";
  bool virtual_clock = false;
  std::string record;
  std::string lm_replay;
  bool verbose = false;
};

nlohmann::json config_json(const Options& o) {
  return o.config.empty() ? nlohmann::json::object() : read_json_file(o.config);
}

ServiceConfig service_config(const Options& o) {
  const auto j = config_json(o);
  return j.contains("service") ? service_config_from_json(j["service"]) : ServiceConfig{};
}

std::shared_ptr<LmBackend> make_backend(const Options& o) {
  std::shared_ptr<LmBackend> backend;
  if (!o.lm_replay.empty()) {
    backend = std::make_shared<ReplayBackend>(o.lm_replay);
  } else if (o.backend == "http") {
    const auto j = config_json(o);
    auto cfg = j.contains("lm") ? http_config_from_json(j["lm"]) : HttpBackendConfig::from_env();
    if (cfg.endpoint.empty()) throw std::runtime_error("no LM endpoint: set EMTREE_LM_ENDPOINT or \"lm.endpoint\"");
    backend = std::make_shared<HttpChatBackend>(cfg);
  } else {
    backend = std::make_shared<ScriptedBackend>(household_scripted_config());
  }
  if (!o.record.empty()) backend = std::make_shared<RecordingBackend>(backend, o.record);
  return backend;
}

std::shared_ptr<Clock> make_clock(const Options& o, std::optional<Timestamp> start = std::nullopt) {
  if (o.virtual_clock) return std::make_shared<VirtualClock>(start.value_or(Timestamp{}));
  return std::make_shared<SystemClock>();
}

std::vector<std::string> seed_rules(const std::string& path) {
  if (path.empty() || !std::filesystem::exists(path)) return {};
  return RuleStore::load(path).texts();
}

HttpApi* g_api = nullptr;

void on_signal(int) {
  if (g_api) g_api->stop();
}

int cmd_serve(const Options& o, const std::string& host, int port, const std::string& rules) {
  auto service = std::make_unique<MemoryService>(std::make_shared<LmGateway>(make_backend(o)), service_config(o),
                                                 make_clock(o), seed_rules(rules));
  service->start();
  HttpApi api(*service);
  g_api = &api;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  logger()->info("listening on {}:{}", host, port);
  api.serve(host, port);
  g_api = nullptr;
  service->stop();
  if (!rules.empty()) service->rules().save(rules);
  return 0;
}

int cmd_replay(const Options& o, const std::string& file, const std::string& tree_out, bool trace) {
  const auto events = read_event_file(file);
  std::optional<Timestamp> start;
  if (!events.empty()) start = events.front().at;
  MemoryService service(std::make_shared<LmGateway>(make_backend(o)), service_config(o), make_clock(o, start));
  if (trace) {
    service.set_trace_hook([](const UpdateTrace& t, const HistoryTree&) { std::cerr << t.log_lines(); });
  }
  for (const auto& e : events) {
    service.ingest(e);
    service.drain();
  }
  const auto tree = service.latest_snapshot();
  if (!tree_out.empty()) write_tree_file(*tree, tree_out);
  std::cout << metrics_json(service.lag_metrics(), *tree, service.gateway().ledger()) << '\n';
  return 0;
}

int cmd_ask(const Options& o, const std::string& text, const std::string& tree_file, const std::string& at, bool flat) {
  const auto tree = read_tree_file(tree_file);
  Timestamp now = tree.root.span.end;
  if (!at.empty()) {
    const auto t = parse_timestamp(at);
    if (!t) throw std::runtime_error("unreadable timestamp '" + at + "'");
    now = *t;
  } else if (!o.virtual_clock) {
    now = SystemClock{}.now();
  }
  LmGateway gateway(make_backend(o));
  const auto cfg = service_config(o);
  const auto result = answer_question(gateway, tree, text, now, flat ? QaMode::flat : cfg.qa_mode, cfg.agent);
  std::cout << qa_result_json(result) << '\n';
  return 0;
}

int cmd_feedback(const Options& o, const std::string& text, const std::string& rules_file) {
  RuleStore store(seed_rules(rules_file));
  LmGateway gateway(make_backend(o));
  const auto rules = store.learn_from_feedback(gateway, text, SystemClock{}.now());
  if (!rules_file.empty()) store.save(rules_file);
  std::cout << rules_json(*rules, store.audit()) << '\n';
  return 0;
}

void write_or_print(const std::filesystem::path& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_eval(const Options& o, const std::string& file) {
  auto spec = eval_spec_from_json(read_json_file(file));
  if (o.backend == "http" || !o.lm_replay.empty()) {
    spec.harness.backend = [o] { return make_backend(o); };
  }
  std::vector<Variant> variants;
  if (spec.variants.empty()) {
    variants = standard_variants();
  } else {
    for (const auto& v : spec.variants) variants.push_back(variant_by_name(v));
  }
  std::vector<ExperimentReport> reports;
  if (spec.episode_files.empty()) {
    reports = run_matrix(variants, spec.seeds, spec.harness, spec.threads);
  } else {
    std::vector<std::vector<EventRecord>> episodes;
    for (const auto& f : spec.episode_files) episodes.push_back(read_event_file(f));
    std::vector<Scenario> scenarios;
    for (const auto seed : spec.seeds) {
      Scenario s;
      s.seed = seed;
      s.history = synthesize_history(episodes, spec.harness.generator.episodes, seed, spec.harness.generator);
      s.pairs = generate_two_round_qa(s.history, spec.harness.qa_pairs, spec.harness.question_offset());
      scenarios.push_back(std::move(s));
    }
    reports = run_matrix(variants, scenarios, spec.harness, spec.threads);
  }
  write_or_print(spec.report, report_tsv(aggregate(reports)));
  if (!spec.details.empty()) write_or_print(spec.details, details_tsv(reports));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Episodic memory tree for long-running robots"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "JSON config file ({\"service\": {...}, \"lm\": {...}})");
  app.add_option("--lm-backend", o.backend, "Language model backend")
      ->check(CLI::IsMember({"scripted", "http"}));
  app.add_flag("--virtual-clock", o.virtual_clock, "Follow event timestamps instead of the wall clock");
  app.add_option("--record", o.record, "Append every model exchange to this file");
  app.add_option("--lm-replay", o.lm_replay, "Serve model responses from a recorded file");
  app.add_flag("-v,--verbose", o.verbose, "Debug logging");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::string rules_file;
  auto* serve = app.add_subcommand("serve", "Run the ingestion service with its HTTP API");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--rules", rules_file, "Rule file loaded at start and saved at exit");

  std::string event_file, tree_out;
  bool trace = false;
  auto* replay = app.add_subcommand("replay", "Feed an event file through the service");
  replay->add_option("event-file", event_file)->required()->check(CLI::ExistingFile);
  replay->add_option("--tree-out", tree_out, "Write the final tree here");
  replay->add_flag("--trace", trace, "Print one line per model call of every update to stderr");

  std::string text, tree_file, at;
  bool flat = false;
  auto* ask = app.add_subcommand("ask", "Answer a question from a saved tree");
  ask->add_option("text", text)->required();
  ask->add_option("--tree", tree_file)->required()->check(CLI::ExistingFile);
  ask->add_option("--at", at, "Question time (default: now, or the end of the tree with --virtual-clock)");
  ask->add_flag("--flat", flat, "Search the goal list instead of browsing the tree");

  std::string feedback_text;
  auto* feedback = app.add_subcommand("feedback", "Turn feedback into updated rules");
  feedback->add_option("text", feedback_text)->required();
  feedback->add_option("--rules", rules_file, "Rule file to update");

  std::string eval_file;
  auto* eval = app.add_subcommand("eval", "Run the two-round evaluation");
  eval->add_option("config", eval_file)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  logger()->set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*serve) return cmd_serve(o, host, port, rules_file);
    if (*replay) return cmd_replay(o, event_file, tree_out, trace);
    if (*ask) return cmd_ask(o, text, tree_file, at, flat);
    if (*feedback) return cmd_feedback(o, feedback_text, rules_file);
    if (*eval) return cmd_eval(o, eval_file);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
