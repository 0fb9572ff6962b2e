#include "emtree/lm.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "emtree/log.hpp"

namespace emtree {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kPromptKindCount> kKindNames = {
    "grouping", "relevance-estimation", "rule-learning", "qa-agent",
    "dialog-routing", "judge", "simple-summarize"};

std::size_t index_of(PromptKind kind) { return static_cast<std::size_t>(kind); }

}  // namespace

std::string_view to_string(PromptKind kind) { return kKindNames[index_of(kind)]; }

std::optional<PromptKind> prompt_kind_from_string(std::string_view text) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == text) return static_cast<PromptKind>(i);
  }
  return std::nullopt;
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::human: return "human";
    case Role::ai: return "ai";
  }
  return "human";
}

std::optional<Role> role_from_string(std::string_view text) {
  if (text == "system") return Role::system;
  if (text == "human") return Role::human;
  if (text == "ai") return Role::ai;
  return std::nullopt;
}

std::int64_t count_tokens(std::string_view text) {
  std::int64_t n = 0;
  bool in_token = false;
  for (const char c : text) {
    const bool space = c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

std::int64_t count_tokens(const std::vector<Message>& messages) {
  std::int64_t n = 0;
  for (const auto& m : messages) n += count_tokens(m.text);
  return n;
}

void UsageLedger::record(PromptKind kind, const TokenUsage& usage) {
  std::lock_guard lock(mutex_);
  usage_[index_of(kind)] += usage;
  ++calls_[index_of(kind)];
}

TokenUsage UsageLedger::of(PromptKind kind) const {
  std::lock_guard lock(mutex_);
  return usage_[index_of(kind)];
}

std::int64_t UsageLedger::calls(PromptKind kind) const {
  std::lock_guard lock(mutex_);
  return calls_[index_of(kind)];
}

TokenUsage UsageLedger::total() const {
  std::lock_guard lock(mutex_);
  TokenUsage sum;
  for (const auto& u : usage_) sum += u;
  return sum;
}

void UsageLedger::reset() {
  std::lock_guard lock(mutex_);
  usage_.fill({});
  calls_.fill(0);
}

LmGateway::LmGateway(std::shared_ptr<LmBackend> backend, GatewayOptions options)
    : backend_(std::move(backend)), options_(options) {
  if (!backend_) throw std::invalid_argument("LmGateway needs a backend");
}

void LmGateway::set_before_call(std::function<void(const LmRequest&)> hook) {
  std::lock_guard lock(hook_mutex_);
  before_call_ = std::move(hook);
}

LmResponse LmGateway::complete(const LmRequest& request) {
  if (request.messages.empty() || request.messages.front().role != Role::system) {
    throw std::invalid_argument("prompt must start with a system message");
  }
  std::function<void(const LmRequest&)> hook;
  {
    std::lock_guard lock(hook_mutex_);
    hook = before_call_;
  }
  if (hook) hook(request);

  auto response = backend_->complete(request);
  if (response.text.size() > options_.max_response_chars) {
    logger()->warn("{} response truncated from {} to {} chars", to_string(request.kind),
                   response.text.size(), options_.max_response_chars);
    response.text.resize(options_.max_response_chars);
    response.truncated = true;
  }
  ledger_.record(request.kind, response.usage);
  return response;
}

namespace {

json request_to_json(const LmRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", std::string{to_string(m.role)}}, {"text", m.text}});
  }
  return {{"kind", std::string{to_string(request.kind)}}, {"messages", std::move(messages)}};
}

LmRequest request_from_json(const json& j) {
  LmRequest request;
  const auto kind = prompt_kind_from_string(j.at("kind").get<std::string>());
  if (!kind) throw std::runtime_error("unknown prompt kind in recording");
  request.kind = *kind;
  for (const auto& m : j.at("messages")) {
    const auto role = role_from_string(m.at("role").get<std::string>());
    if (!role) throw std::runtime_error("unknown role in recording");
    request.messages.push_back({*role, m.at("text").get<std::string>()});
  }
  return request;
}

}  // namespace

RecordingBackend::RecordingBackend(std::shared_ptr<LmBackend> inner, std::string path)
    : inner_(std::move(inner)), path_(std::move(path)) {}

LmResponse RecordingBackend::complete(const LmRequest& request) {
  auto response = inner_->complete(request);
  json line = request_to_json(request);
  line["response"] = response.text;
  line["prompt_tokens"] = response.usage.prompt_tokens;
  line["completion_tokens"] = response.usage.completion_tokens;
  std::lock_guard lock(mutex_);
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  out << line.dump() << '\n';
  return response;
}

ReplayBackend::ReplayBackend(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open recording " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    Entry e;
    e.request = request_from_json(j);
    e.response.text = j.at("response").get<std::string>();
    e.response.usage = {j.at("prompt_tokens").get<std::int64_t>(),
                        j.at("completion_tokens").get<std::int64_t>()};
    entries_.push_back(std::move(e));
  }
}

LmResponse ReplayBackend::complete(const LmRequest& request) {
  for (const auto& e : entries_) {
    if (e.request.kind == request.kind && e.request.messages == request.messages) return e.response;
  }
  throw BackendUnreachable("no recorded response for this " + std::string{to_string(request.kind)} +
                           " request");
}

HttpBackendConfig HttpBackendConfig::from_env() {
  HttpBackendConfig config;
  auto env = [](const char* key) -> std::string {
    const char* v = std::getenv(key);
    return v ? v : "";
  };
  config.endpoint = env("EMTREE_LM_ENDPOINT");
  config.model = env("EMTREE_LM_MODEL");
  config.api_key = env("EMTREE_LM_API_KEY");
  return config;
}

HttpChatBackend::HttpChatBackend(HttpBackendConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw std::invalid_argument("http backend needs an endpoint");
}

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, "/v1/chat/completions"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

std::string wire_role(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::human: return "user";
    case Role::ai: return "assistant";
  }
  return "user";
}

}  // namespace

LmResponse HttpChatBackend::complete(const LmRequest& request) {
  const auto url = split_url(config_.endpoint);
  json body;
  body["model"] = config_.model;
  body["temperature"] = config_.temperature;
  body["messages"] = json::array();
  for (const auto& m : request.messages) {
    body["messages"].push_back({{"role", wire_role(m.role)}, {"content", m.text}});
  }
  const auto payload = body.dump();

  httplib::Client client(url.origin);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  client.set_write_timeout(config_.timeout_seconds);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  std::string last_error;
  const int attempts = std::max(1, config_.max_retries + 1);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(config_.retry_backoff_ms * attempt));
    }
    auto res = client.Post(url.path, headers, payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendUnreachable("chat endpoint rejected request with status " +
                               std::to_string(res->status) + ": " + res->body);
    }
    try {
      const auto j = json::parse(res->body);
      LmResponse out;
      out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (j.contains("usage")) {
        out.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
        out.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
      } else {
        out.usage = {count_tokens(request.messages), count_tokens(out.text)};
      }
      return out;
    } catch (const json::exception& e) {
      last_error = std::string{"malformed response: "} + e.what();
    }
  }
  throw BackendUnreachable("chat endpoint " + config_.endpoint + " unreachable after " +
                           std::to_string(attempts) + " attempts: " + last_error);
}

}  // namespace emtree
