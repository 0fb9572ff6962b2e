#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "emtree/agent.hpp"
#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"
#include "emtree/prompts.hpp"
#include "emtree/rules.hpp"

namespace emtree {

struct DialogTurn {
  std::string speaker;  // "user" or "robot"
  std::string text;
};

inline constexpr std::size_t kDialogWindow = 10;

// One routing call. Failures and unreadable replies route to a question on the utterance.
RouteDecision route(LmGateway& gateway, std::string_view utterance, const std::deque<DialogTurn>& context);

struct DialogReply {
  RouteDecision::Type type = RouteDecision::Type::question;
  std::string text;
  std::optional<QaResult> qa;
  std::optional<std::uint64_t> rules_version;
};

class DialogSession {
 public:
  using SnapshotSource = std::function<std::shared_ptr<const HistoryTree>()>;
  using ClockSource = std::function<Timestamp()>;

  DialogSession(LmGateway& gateway, SnapshotSource snapshots, RuleStore& rules, ClockSource clock,
                QaMode mode = QaMode::tree, AgentConfig agent = {});

  DialogReply handle(std::string_view utterance);
  // Skip routing, for callers that already know what the utterance is.
  DialogReply ask(std::string_view question);
  DialogReply feedback(std::string_view text);

  const std::deque<DialogTurn>& context() const { return context_; }

 private:
  void remember(std::string speaker, std::string text);

  LmGateway& gateway_;
  SnapshotSource snapshots_;
  RuleStore& rules_;
  ClockSource clock_;
  QaMode mode_;
  AgentConfig agent_;
  std::deque<DialogTurn> context_;
};

}  // namespace emtree
