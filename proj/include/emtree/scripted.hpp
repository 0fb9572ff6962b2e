#pragma once

#include <string>
#include <vector>

#include "emtree/lm.hpp"

namespace emtree {

enum class GroupingPolicy {
  new_group,         // all current items form one new group
  append_to_latest,  // items join the newest group until it holds max_group_size items
  merge_all,         // every presented item ends up in one group
};

// Canned response for requests of `kind` whose text matches `pattern` (ECMAScript regex).
struct ScriptedRule {
  PromptKind kind = PromptKind::grouping;
  std::string pattern;
  std::string response;
};

struct ScriptedConfig {
  GroupingPolicy grouping = GroupingPolicy::new_group;
  std::size_t max_group_size = 5;
  std::string default_relevance = "0";
  // Answer for expired items whose first line shares a vocabulary term with some rule.
  std::string rule_match_relevance = "inf";
  std::vector<std::string> vocabulary;
  std::vector<ScriptedRule> rules;  // checked first, in order
  std::size_t summary_limit = 160;
};

// Deterministic stand-in for a language model. It reads the rendered prompt back and
// answers every prompt kind with a fixed policy; the reply depends only on the request.
class ScriptedBackend : public LmBackend {
 public:
  explicit ScriptedBackend(ScriptedConfig config = {});

  LmResponse complete(const LmRequest& request) override;
  std::string name() const override { return "scripted"; }
  const ScriptedConfig& config() const { return config_; }

 private:
  std::string respond(const LmRequest& request) const;
  std::string grouping(const LmRequest& request) const;
  std::string relevance(const LmRequest& request) const;
  std::string rule_learning(const LmRequest& request) const;
  std::string qa_agent(const LmRequest& request) const;
  std::string routing(const LmRequest& request) const;
  std::string judge(const LmRequest& request) const;
  std::string summarize(const LmRequest& request) const;

  ScriptedConfig config_;
};

}  // namespace emtree
