#include "emtree/http_api.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "emtree/log.hpp"
#include "emtree/prompts.hpp"
#include "emtree/tree_io.hpp"

namespace emtree {

namespace {

using Json = nlohmann::ordered_json;

Json usage_json(const TokenUsage& u) {
  return Json{{"prompt_tokens", u.prompt_tokens}, {"completion_tokens", u.completion_tokens}};
}

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, Json{{"error", message}});
}

std::optional<std::string> text_field(const httplib::Request& req, httplib::Response& res) {
  try {
    const auto body = nlohmann::json::parse(req.body);
    if (body.contains("text") && body["text"].is_string() && !trim(body["text"].get<std::string>()).empty()) {
      return body["text"].get<std::string>();
    }
  } catch (const nlohmann::json::exception&) {
  }
  fail(res, 400, "expected a JSON body with a non-empty \"text\" field");
  return std::nullopt;
}

}  // namespace

std::string qa_result_json(const QaResult& r) {
  Json j;
  j["answer"] = r.answer;
  j["forgotten_indicated"] = r.forgotten_indicated;
  j["gave_up"] = r.gave_up;
  j["snapshot_version"] = r.snapshot_version;
  j["usage"] = usage_json(r.usage);
  j["trace"] = Json::array();
  for (const auto& s : r.trace) {
    j["trace"].push_back(Json{{"action", s.action}, {"observation", s.observation}, {"usage", usage_json(s.usage)}});
  }
  return j.dump();
}

std::string rules_json(const RuleSet& rules, const std::vector<AuditRecord>& audit) {
  Json j;
  j["version"] = rules.version;
  j["rules"] = Json::array();
  for (const auto& r : rules.rules) j["rules"].push_back(Json{{"text", r.text}, {"origin", r.origin}});
  j["history"] = Json::array();
  for (const auto& a : audit) {
    Json rec{{"timestamp", format_timestamp(a.at)},
             {"feedback", a.feedback},
             {"before_version", a.before_version},
             {"after_version", a.after_version},
             {"fallback", a.fallback}};
    rec["after"] = Json::array();
    for (const auto& r : a.after) rec["after"].push_back(r.text);
    j["history"].push_back(std::move(rec));
  }
  return j.dump();
}

std::string metrics_json(const LagMetrics& lag, const HistoryTree& tree, const UsageLedger& ledger) {
  Json j;
  j["received"] = lag.received;
  j["processed"] = lag.processed;
  j["pending"] = lag.pending;
  j["delay_seconds"] = lag.delay.count();
  j["version"] = tree.version;
  j["nodes"] = count_nodes(tree, 0);
  j["goal_and_higher_nodes"] = count_nodes(tree, kGoalLevel);
  j["sweeps"] = lag.sweeps;
  j["interrupted_sweeps"] = lag.interrupted_sweeps;
  Json usage = Json::object();
  for (std::size_t k = 0; k < kPromptKindCount; ++k) {
    const auto kind = static_cast<PromptKind>(k);
    auto u = usage_json(ledger.of(kind));
    u["calls"] = ledger.calls(kind);
    usage[std::string{to_string(kind)}] = std::move(u);
  }
  j["usage"] = std::move(usage);
  return j.dump();
}

HttpApi::HttpApi(MemoryService& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  routes();
}

HttpApi::~HttpApi() { stop(); }

void HttpApi::routes() {
  auto& s = *server_;

  s.Post("/events", [this](const httplib::Request& req, httplib::Response& res) {
    std::vector<EventRecord> records;
    try {
      for (const auto& line : split_lines(req.body)) {
        if (!trim(line).empty()) records.push_back(parse_event(line));
      }
      if (records.empty()) return fail(res, 400, "no events in request body");
    } catch (const InvalidEvent& e) {
      return fail(res, 400, e.what());
    }
    std::size_t accepted = 0;
    std::size_t depth = 0;
    for (const auto& r : records) {
      try {
        depth = service_.ingest(r);
        ++accepted;
      } catch (const InvalidEvent& e) {
        return reply(res, 409, Json{{"error", e.what()}, {"accepted", accepted}});
      }
    }
    reply(res, 202, Json{{"accepted", accepted}, {"queue_depth", depth}});
  });

  s.Post("/ask", [this](const httplib::Request& req, httplib::Response& res) {
    const auto text = text_field(req, res);
    if (!text) return;
    const auto result = service_.ask(*text);
    res.set_content(qa_result_json(result), "application/json");
  });

  s.Post("/feedback", [this](const httplib::Request& req, httplib::Response& res) {
    const auto text = text_field(req, res);
    if (!text) return;
    const auto rules = service_.feedback(*text);
    res.set_content(rules_json(*rules, {}), "application/json");
  });

  s.Get("/tree", [this](const httplib::Request& req, httplib::Response& res) {
    std::shared_ptr<const HistoryTree> tree;
    if (req.has_param("version")) {
      try {
        tree = service_.snapshot(std::stoull(req.get_param_value("version")));
      } catch (const std::exception&) {
        return fail(res, 400, "version must be a non-negative integer");
      }
      if (!tree) return fail(res, 404, "unknown snapshot version");
    } else {
      tree = service_.latest_snapshot();
    }
    res.set_header("X-Tree-Version", std::to_string(tree->version));
    res.set_content(serialize_tree(*tree), "text/plain");
  });

  s.Get("/rules", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(rules_json(*service_.rules().current(), service_.rules().audit()), "application/json");
  });

  s.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
    const auto lag = service_.lag_metrics();
    res.set_content(metrics_json(lag, *service_.latest_snapshot(), service_.gateway().ledger()),
                    "application/json");
  });

  s.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, Json{{"status", "ok"}, {"version", service_.latest_snapshot()->version}});
  });

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      logger()->error("request failed: {}", e.what());
      fail(res, 500, e.what());
    } catch (...) {
      fail(res, 500, "unknown error");
    }
  });
}

int HttpApi::start(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void HttpApi::serve(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpApi::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace emtree
