#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"

namespace emtree {

class MissingBinding : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Section markers shared by the renderers and by anything that reads prompts back.
namespace marker {
inline constexpr std::string_view previous = "Previous actions:";
inline constexpr std::string_view current = "Current:";
inline constexpr std::string_view summary_rules = "Rules about what matters to the user:";
inline constexpr std::string_view relevance_rules = "Rules about what is relevant and what not:";
inline constexpr std::string_view expired_item = "Expired item:";
inline constexpr std::string_view parent_item = "Parent item:";
inline constexpr std::string_view now = "Now:";
inline constexpr std::string_view existing_rules = "Existing set of rules:";
inline constexpr std::string_view feedback = "User feedback:";
inline constexpr std::string_view question = "Question:";
inline constexpr std::string_view memory = "Memory:";
inline constexpr std::string_view result_of = "Result of ";
inline constexpr std::string_view utterance = "Utterance:";
inline constexpr std::string_view recent_dialog = "Recent dialog:";
inline constexpr std::string_view ground_truth = "Ground truth:";
inline constexpr std::string_view answer = "Answer:";
inline constexpr std::string_view items = "Items:";
inline constexpr std::string_view search_action = "search(<keywords>)";
}  // namespace marker

inline constexpr std::string_view kAnswerQuestionFn = "answer_question_about_my_past";
inline constexpr std::string_view kFeedbackFn = "handle_forgetting_feedback";
inline constexpr std::string_view kReplyFn = "reply";

// Grouping items are numbered backwards: the newest item has index 0.
struct PresentedItem {
  int index = 0;
  std::string text;  // "<span>: <summary>", continuation lines indented by two spaces
};

struct PresentedGroup {
  std::string summary;
  std::vector<PresentedItem> items;  // oldest first
};

struct GroupingBindings {
  std::vector<PresentedGroup> previous;
  std::vector<PresentedItem> current;
  std::optional<std::string> rules;  // numbered rule block, when summaries follow learned rules
};

struct RelevanceBindings {
  std::string rules_block;  // output of render_rules
  std::string item;
  std::string parent;  // empty for top-level nodes
  Timestamp now;
};

struct RuleLearningBindings {
  std::vector<std::string> rules;
  std::string feedback;
};

struct QaBindings {
  std::string question;
  Timestamp now;
  std::string memory;
  bool search_enabled = false;
};

struct RoutingBindings {
  std::vector<std::pair<std::string, std::string>> context;  // (speaker, text)
  std::string utterance;
};

struct JudgeBindings {
  std::string question;
  std::string ground_truth;
  std::string hypothesis;
};

struct SummarizeBindings {
  std::vector<std::string> items;
  std::optional<std::string> rules;
};

std::vector<Message> render_grouping_prompt(const GroupingBindings& b);
std::vector<Message> render_relevance_prompt(const RelevanceBindings& b);
std::vector<Message> render_rule_learning_prompt(const RuleLearningBindings& b);
std::vector<Message> render_qa_prompt(const QaBindings& b);
std::vector<Message> render_routing_prompt(const RoutingBindings& b);
std::vector<Message> render_judge_prompt(const JudgeBindings& b);
std::vector<Message> render_summarize_prompt(const SummarizeBindings& b);

// ---- response parsing ------------------------------------------------------

struct GroupingDirective {
  int high = 0;  // oldest item index of the range
  int low = 0;   // newest item index of the range
  std::string summary;
  bool operator==(const GroupingDirective&) const = default;
};

// Reads the JSON map after "JSON:" (or the first JSON object in the text).
std::optional<std::vector<GroupingDirective>> parse_grouping(std::string_view response);

struct RelevanceScore {
  bool infinite = false;
  int value = 0;  // 0..100

  static RelevanceScore infinity() { return {true, 0}; }
  static RelevanceScore finite(long long v);
  bool operator==(const RelevanceScore&) const = default;
};

std::optional<RelevanceScore> parse_relevance(std::string_view response);

// Numbered lines ("1. text" or "1) text"); anything else is ignored.
std::optional<std::vector<std::string>> parse_numbered_list(std::string_view response);

struct AgentAction {
  enum class Type { expand, search, answer } type = Type::answer;
  NodeId node = 0;
  std::string text;
};
std::optional<AgentAction> parse_agent_action(std::string_view response);

struct RouteDecision {
  enum class Type { question, feedback, direct } type = Type::question;
  std::string text;
};
std::optional<RouteDecision> parse_route(std::string_view response);

enum class Verdict { correct, partially_correct, wrong, no_answer, forgotten };
std::string_view to_string(Verdict v);
std::optional<Verdict> verdict_from_string(std::string_view text);
std::optional<Verdict> parse_judge(std::string_view response);

std::optional<std::string> parse_summary(std::string_view response);

// ---- small text helpers shared by prompt producers and readers --------------

std::string trim(std::string_view s);
std::vector<std::string> split_lines(std::string_view s);
std::string to_lower(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

}  // namespace emtree
