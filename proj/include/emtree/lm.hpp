#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace emtree {

enum class PromptKind {
  grouping,
  relevance_estimation,
  rule_learning,
  qa_agent,
  dialog_routing,
  judge,
  simple_summarize,
};
inline constexpr std::size_t kPromptKindCount = 7;

std::string_view to_string(PromptKind kind);
std::optional<PromptKind> prompt_kind_from_string(std::string_view text);

enum class Role { system, human, ai };
std::string_view to_string(Role role);
std::optional<Role> role_from_string(std::string_view text);

struct Message {
  Role role = Role::human;
  std::string text;
  bool operator==(const Message&) const = default;
};

struct TokenUsage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  std::int64_t total() const { return prompt_tokens + completion_tokens; }
  TokenUsage& operator+=(const TokenUsage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    return *this;
  }
  friend TokenUsage operator+(TokenUsage a, const TokenUsage& b) { return a += b; }
  friend TokenUsage operator-(const TokenUsage& a, const TokenUsage& b) {
    return {a.prompt_tokens - b.prompt_tokens, a.completion_tokens - b.completion_tokens};
  }
  bool operator==(const TokenUsage&) const = default;
};

struct LmRequest {
  PromptKind kind = PromptKind::grouping;
  std::vector<Message> messages;
};

struct LmResponse {
  std::string text;
  TokenUsage usage;
  bool truncated = false;
};

class BackendUnreachable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LmBackend {
 public:
  virtual ~LmBackend() = default;
  virtual LmResponse complete(const LmRequest& request) = 0;
  virtual std::string name() const = 0;
};

// Number of whitespace-separated tokens.
std::int64_t count_tokens(std::string_view text);
std::int64_t count_tokens(const std::vector<Message>& messages);

// Per-kind usage totals. All members are safe to call concurrently.
class UsageLedger {
 public:
  void record(PromptKind kind, const TokenUsage& usage);
  TokenUsage of(PromptKind kind) const;
  std::int64_t calls(PromptKind kind) const;
  TokenUsage total() const;
  void reset();

 private:
  mutable std::mutex mutex_;
  std::array<TokenUsage, kPromptKindCount> usage_{};
  std::array<std::int64_t, kPromptKindCount> calls_{};
};

struct GatewayOptions {
  std::size_t max_response_chars = 16384;
};

// Front door for all model calls: validates the request shape, truncates oversized
// responses and books usage into the ledger.
class LmGateway {
 public:
  explicit LmGateway(std::shared_ptr<LmBackend> backend, GatewayOptions options = {});

  LmResponse complete(const LmRequest& request);

  UsageLedger& ledger() { return ledger_; }
  const UsageLedger& ledger() const { return ledger_; }
  LmBackend& backend() { return *backend_; }

  // Invoked before every backend call; used by schedulers to count call boundaries.
  void set_before_call(std::function<void(const LmRequest&)> hook);

 private:
  std::shared_ptr<LmBackend> backend_;
  GatewayOptions options_;
  UsageLedger ledger_;
  std::mutex hook_mutex_;
  std::function<void(const LmRequest&)> before_call_;
};

// Appends every exchange to a line-delimited file and forwards to `inner`.
class RecordingBackend : public LmBackend {
 public:
  RecordingBackend(std::shared_ptr<LmBackend> inner, std::string path);
  LmResponse complete(const LmRequest& request) override;
  std::string name() const override { return "recording(" + inner_->name() + ")"; }

 private:
  std::shared_ptr<LmBackend> inner_;
  std::string path_;
  std::mutex mutex_;
};

// Serves responses from a recorded file; unknown requests raise BackendUnreachable.
class ReplayBackend : public LmBackend {
 public:
  explicit ReplayBackend(const std::string& path);
  LmResponse complete(const LmRequest& request) override;
  std::string name() const override { return "replay"; }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    LmRequest request;
    LmResponse response;
  };
  std::vector<Entry> entries_;
};

struct HttpBackendConfig {
  std::string endpoint;  // e.g. http://localhost:8000/v1/chat/completions
  std::string model;
  std::string api_key;
  double temperature = 0.0;
  int timeout_seconds = 60;
  int max_retries = 3;
  int retry_backoff_ms = 200;

  // EMTREE_LM_ENDPOINT, EMTREE_LM_MODEL, EMTREE_LM_API_KEY
  static HttpBackendConfig from_env();
};

// OpenAI-style chat-completions client.
class HttpChatBackend : public LmBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig config);
  LmResponse complete(const LmRequest& request) override;
  std::string name() const override { return "http(" + config_.model + ")"; }

 private:
  HttpBackendConfig config_;
};

}  // namespace emtree
