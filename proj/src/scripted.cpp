#include "emtree/scripted.hpp"

#include <algorithm>
#include <regex>
#include <set>

#include <nlohmann/json.hpp>

#include "emtree/prompts.hpp"
#include "emtree/text.hpp"

namespace emtree {

namespace {

const Message* find_message(const LmRequest& req, std::string_view prefix) {
  for (const auto& m : req.messages) {
    if (m.role == Role::human && starts_with(m.text, prefix)) return &m;
  }
  return nullptr;
}

std::string joined_text(const LmRequest& req) {
  std::string out;
  for (const auto& m : req.messages) out += m.text + "\n";
  return out;
}

struct Item {
  int index = 0;
  std::string text;
};

struct Group {
  std::string summary;
  std::vector<Item> items;
};

// "- 3: text" lines with two-space continuation lines.
void parse_item_line(const std::string& line, std::vector<Item>& items) {
  static const std::regex item_re(R"(^\s*- (\d+): (.*)$)");
  std::smatch m;
  if (std::regex_match(line, m, item_re)) {
    items.push_back({std::stoi(m[1].str()), m[2].str()});
  } else if (!items.empty() && starts_with(line, "  ")) {
    items.back().text += "\n" + line.substr(2);
  }
}

std::vector<Group> parse_groups(std::string_view block) {
  static const std::regex header_re(R"(^# \((\d+) - (\d+)\) (.*)$)");
  std::vector<Group> groups;
  for (const auto& line : split_lines(block)) {
    std::smatch m;
    if (std::regex_match(line, m, header_re)) {
      groups.push_back({m[3].str(), {}});
    } else if (!groups.empty()) {
      parse_item_line(line, groups.back().items);
    }
  }
  return groups;
}

std::vector<Item> parse_items(std::string_view block) {
  std::vector<Item> items;
  for (const auto& line : split_lines(block)) parse_item_line(line, items);
  return items;
}

// "<span>: summary" -> first summary line, with the tombstone marker stripped.
std::string item_phrase(const std::string& text) {
  auto first = split_lines(text).front();
  const auto colon = first.find(": ");
  std::string summary = colon == std::string::npos ? first : first.substr(colon + 2);
  constexpr std::string_view kForgotten = "forgotten: ";
  if (starts_with(summary, kForgotten)) summary = summary.substr(kForgotten.size());
  return summary;
}

std::vector<std::string> rule_terms(const LmRequest& req, std::string_view marker_text,
                                    const std::vector<std::string>& vocabulary) {
  const auto* m = find_message(req, marker_text);
  if (!m) return {};
  std::vector<std::string> terms;
  for (const auto& rule : parse_numbered_list(m->text).value_or(std::vector<std::string>{})) {
    for (auto& t : matching_terms(rule, vocabulary)) {
      if (std::find(terms.begin(), terms.end(), t) == terms.end()) terms.push_back(t);
    }
  }
  return terms;
}

std::string range_key(int high, int low) {
  return high == low ? std::to_string(low) : std::to_string(high) + "-" + std::to_string(low);
}

}  // namespace

ScriptedBackend::ScriptedBackend(ScriptedConfig config) : config_(std::move(config)) {}

LmResponse ScriptedBackend::complete(const LmRequest& request) {
  LmResponse out;
  out.text = respond(request);
  out.usage = {count_tokens(request.messages), count_tokens(out.text)};
  return out;
}

std::string ScriptedBackend::respond(const LmRequest& request) const {
  if (!config_.rules.empty()) {
    const auto text = joined_text(request);
    for (const auto& rule : config_.rules) {
      if (rule.kind == request.kind && std::regex_search(text, std::regex(rule.pattern))) {
        return rule.response;
      }
    }
  }
  switch (request.kind) {
    case PromptKind::grouping: return grouping(request);
    case PromptKind::relevance_estimation: return relevance(request);
    case PromptKind::rule_learning: return rule_learning(request);
    case PromptKind::qa_agent: return qa_agent(request);
    case PromptKind::dialog_routing: return routing(request);
    case PromptKind::judge: return judge(request);
    case PromptKind::simple_summarize: return summarize(request);
  }
  return "";
}

std::string ScriptedBackend::grouping(const LmRequest& request) const {
  const auto* prev_msg = find_message(request, marker::previous);
  const auto* cur_msg = find_message(request, marker::current);
  if (!cur_msg) return "Reasoning: nothing to group.\nJSON: {}";
  auto previous = prev_msg ? parse_groups(prev_msg->text) : std::vector<Group>{};
  const auto current = parse_items(cur_msg->text);
  if (current.empty()) return "Reasoning: nothing to group.\nJSON: {}";
  const auto keep = rule_terms(request, marker::summary_rules, config_.vocabulary);

  auto summary_of = [&](const std::vector<Item>& items) {
    std::vector<std::string> lines;
    for (const auto& item : items) lines.push_back(item_phrase(item.text));
    return condense_lines(lines, keep, config_.summary_limit);
  };

  std::vector<std::vector<Item>> changed;
  std::string policy;
  switch (config_.grouping) {
    case GroupingPolicy::new_group:
      policy = "the current items start a new group";
      changed.push_back(current);
      break;
    case GroupingPolicy::merge_all: {
      policy = "everything belongs to one group";
      std::vector<Item> all;
      for (const auto& g : previous) all.insert(all.end(), g.items.begin(), g.items.end());
      all.insert(all.end(), current.begin(), current.end());
      changed.push_back(std::move(all));
      break;
    }
    case GroupingPolicy::append_to_latest: {
      policy = "current items extend the newest group while it has room";
      bool touched_last = false;
      std::vector<std::vector<Item>> fresh;
      for (const auto& item : current) {
        if (fresh.empty() && !previous.empty() && !previous.back().items.empty() &&
            previous.back().items.size() < config_.max_group_size) {
          previous.back().items.push_back(item);
          touched_last = true;
        } else if (!fresh.empty() && fresh.back().size() < config_.max_group_size) {
          fresh.back().push_back(item);
        } else {
          fresh.push_back({item});
        }
      }
      if (touched_last) changed.push_back(previous.back().items);
      for (auto& g : fresh) changed.push_back(std::move(g));
      break;
    }
  }

  nlohmann::ordered_json directives = nlohmann::ordered_json::object();
  for (const auto& g : changed) {
    directives[range_key(g.front().index, g.back().index)] = summary_of(g);
  }
  return "Reasoning: Scripted policy, " + policy + ".\nJSON: " + directives.dump();
}

std::string ScriptedBackend::relevance(const LmRequest& request) const {
  const auto* item_msg = find_message(request, marker::expired_item);
  std::string first_line;
  if (item_msg) {
    const auto lines = split_lines(item_msg->text);
    if (lines.size() > 1) first_line = item_phrase(lines[1]);
  }
  const auto terms = rule_terms(request, marker::relevance_rules, config_.vocabulary);
  for (const auto& t : terms) {
    if (contains_term(first_line, t)) {
      return "Reasoning: A rule asks to keep everything about " + t + ".\nRelevance: " +
             config_.rule_match_relevance;
    }
  }
  return "Reasoning: No rule applies to this item.\nRelevance: " + config_.default_relevance;
}

std::string ScriptedBackend::rule_learning(const LmRequest& request) const {
  std::vector<std::string> rules;
  if (const auto* m = find_message(request, marker::existing_rules)) {
    rules = parse_numbered_list(m->text).value_or(std::vector<std::string>{});
  }
  if (const auto* m = find_message(request, marker::feedback)) {
    auto text = trim(std::string_view{m->text}.substr(marker::feedback.size()));
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = text.substr(1, text.size() - 2);
    if (!text.empty() && std::find(rules.begin(), rules.end(), text) == rules.end()) {
      rules.push_back(text);
    }
  }
  std::string out;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    out += (i ? "\n" : "") + std::to_string(i + 1) + ". " + rules[i];
  }
  return out;
}

namespace {

struct ObservedLine {
  NodeId id = 0;
  bool full = false;
  bool placeholder = false;
  std::string span;     // full lines only
  std::string summary;  // first summary line
  std::string raw;
};

std::vector<ObservedLine> parse_observation(std::string_view text) {
  static const std::regex node_re(R"(^\s*\[(\d+)\] (.*)$)");
  static const std::regex date_re(R"(^\d{4}/\d{2}/\d{2} )");
  std::vector<ObservedLine> out;
  for (const auto& line : split_lines(text)) {
    const auto t = trim(line);
    if (starts_with(t, "forgotten:")) {
      out.push_back({0, false, true, "", "", t});
      continue;
    }
    std::smatch m;
    if (!std::regex_match(line, m, node_re)) continue;
    ObservedLine o;
    o.id = std::stoull(m[1].str());
    o.raw = t;
    const auto rest = m[2].str();
    const auto colon = rest.find(": ");
    if (colon != std::string::npos && std::regex_search(rest, date_re)) {
      o.full = true;
      o.span = rest.substr(0, colon);
      o.summary = rest.substr(colon + 2);
    } else {
      o.summary = rest;
    }
    out.push_back(std::move(o));
  }
  return out;
}

enum class Asked { pickup, transport, other };

}  // namespace

std::string ScriptedBackend::qa_agent(const LmRequest& request) const {
  const auto* first = find_message(request, marker::question);
  if (!first) return "Reasoning: No question found.\nAction: answer(I do not know.)";
  const auto lines = split_lines(first->text);
  const auto question = trim(std::string_view{lines.front()}.substr(marker::question.size()));
  const auto q = to_lower(question);
  const bool want_first = q.find("first") != std::string::npos;
  Asked asked = Asked::other;
  if (q.find("pick up") != std::string::npos || q.find("picked up") != std::string::npos ||
      q.find("pickup") != std::string::npos) {
    asked = Asked::pickup;
  } else if (q.find("transport") != std::string::npos || q.find("bring") != std::string::npos ||
             q.find("put") != std::string::npos) {
    asked = Asked::transport;
  }
  const auto terms = matching_terms(question, config_.vocabulary);
  if (terms.empty() || asked == Asked::other) {
    return "Reasoning: I cannot tell what to look for.\nAction: answer(I do not know.)";
  }
  const auto& term = terms.front();
  const auto lower_term = to_lower(term);

  const bool search_enabled = request.messages.front().text.find(marker::search_action) != std::string::npos;
  std::set<NodeId> expanded;
  bool searched = false;
  for (const auto& m : request.messages) {
    if (m.role != Role::ai) continue;
    if (const auto a = parse_agent_action(m.text)) {
      if (a->type == AgentAction::Type::expand) expanded.insert(a->node);
      if (a->type == AgentAction::Type::search) searched = true;
    }
  }
  if (search_enabled && !searched) {
    return "Reasoning: Search for the object first.\nAction: search(" + term + " " +
           (asked == Asked::pickup ? "Pickup" : "Place") + ")";
  }

  std::vector<std::vector<ObservedLine>> observations;
  const auto memory_pos = first->text.find(marker::memory);
  if (memory_pos != std::string::npos) {
    observations.push_back(parse_observation(std::string_view{first->text}.substr(memory_pos)));
  }
  for (std::size_t i = 1; i < request.messages.size(); ++i) {
    const auto& m = request.messages[i];
    if (m.role == Role::human && starts_with(m.text, marker::result_of)) {
      observations.push_back(parse_observation(m.text));
    }
  }

  const std::regex pickup_re("^pickup\\(" + lower_term + "(_[^)]*)?\\)$");
  const std::regex place_re("Place\\(" + term + "[^,)]*,\\s*([A-Za-z]+)", std::regex::icase);
  auto pick = [&](const std::vector<const ObservedLine*>& lines) {
    return want_first ? lines.front() : lines.back();
  };

  if (!observations.empty()) {
    std::vector<const ObservedLine*> answerable;
    std::vector<std::string> destinations;
    for (const auto& o : observations.back()) {
      if (o.placeholder) continue;
      if (asked == Asked::pickup && o.full) {
        for (const auto& phrase : std::vector<std::string>{split_lines(o.summary).front()}) {
          if (std::regex_match(to_lower(phrase), pickup_re)) answerable.push_back(&o);
        }
      } else if (asked == Asked::transport) {
        std::smatch m;
        if (std::regex_search(o.summary, m, place_re)) answerable.push_back(&o);
      }
    }
    if (!answerable.empty()) {
      const auto* hit = pick(answerable);
      if (asked == Asked::pickup) {
        return "Reasoning: Found the pickup.\nAction: answer(I picked up the " + lower_term + " at " +
               hit->span.substr(0, 16) + ".)";
      }
      // Within one line, the first (or last) matching placement follows the question.
      std::vector<std::string> dests;
      for (auto it = std::sregex_iterator(hit->summary.begin(), hit->summary.end(), place_re);
           it != std::sregex_iterator(); ++it) {
        dests.push_back((*it)[1].str());
      }
      const auto& dest = want_first ? dests.front() : dests.back();
      return "Reasoning: Found where it was placed.\nAction: answer(I transported the " + lower_term +
             " to the " + dest + ".)";
    }
  }

  // Lines naming the asked action on the object go first.
  const auto action_phrase = to_lower(std::string{asked == Asked::pickup ? "Pickup(" : "Place("} + term);
  for (auto obs = observations.rbegin(); obs != observations.rend(); ++obs) {
    std::vector<const ObservedLine*> candidates;
    std::vector<const ObservedLine*> preferred;
    for (const auto& o : *obs) {
      if (!o.placeholder && o.id != 0 && !expanded.count(o.id) && contains_term(o.summary, term)) {
        candidates.push_back(&o);
        if (to_lower(o.summary).find(action_phrase) != std::string::npos) preferred.push_back(&o);
      }
    }
    if (!preferred.empty()) candidates = preferred;
    if (!candidates.empty()) {
      return "Reasoning: This node mentions " + term + ".\nAction: expand(" +
             std::to_string(pick(candidates)->id) + ")";
    }
  }

  const bool saw_forgotten = std::any_of(observations.begin(), observations.end(), [](const auto& obs) {
    return std::any_of(obs.begin(), obs.end(), [](const auto& o) { return o.placeholder; });
  });
  if (saw_forgotten) {
    return "Reasoning: The relevant period was forgotten.\nAction: answer(There is no record of me " +
           std::string{asked == Asked::pickup ? "picking up" : "transporting"} +
           (std::string_view{"aeiou"}.find(lower_term.front()) != std::string_view::npos ? " an " : " a ") + lower_term +
           ".)";
  }
  return "Reasoning: Nothing matches.\nAction: answer(I do not know.)";
}

std::string ScriptedBackend::routing(const LmRequest& request) const {
  std::string utterance;
  for (const auto& m : request.messages) {
    const auto pos = m.text.rfind(marker::utterance);
    if (m.role == Role::human && pos != std::string::npos) {
      utterance = trim(std::string_view{m.text}.substr(pos + marker::utterance.size()));
    }
  }
  const auto u = to_lower(utterance);
  static const std::vector<std::string> question_starts = {"when ", "where ", "what ", "who ",
                                                           "which ", "how ", "did ", "do ",
                                                           "have ", "to where ", "why "};
  const bool question = (!u.empty() && u.back() == '?') ||
                        std::any_of(question_starts.begin(), question_starts.end(),
                                    [&](const auto& s) { return starts_with(u, s); });
  if (question) {
    return "Reasoning: The user asks about the past.\nCall: " + std::string{kAnswerQuestionFn} + "(" +
           utterance + ")";
  }
  for (const auto* cue : {"remember", "forget", "important", "should", "keep"}) {
    if (u.find(cue) != std::string::npos) {
      return "Reasoning: The user comments on what to keep.\nCall: " + std::string{kFeedbackFn} + "(" +
             utterance + ")";
    }
  }
  const bool greeting = starts_with(u, "hello") || starts_with(u, "hi") || starts_with(u, "hey");
  return "Reasoning: Small talk.\nCall: " + std::string{kReplyFn} + "(" +
         (greeting ? "Hello! How can I help you?" : "Okay.") + ")";
}

std::string ScriptedBackend::judge(const LmRequest& request) const {
  std::string truth;
  std::string answer;
  for (const auto& m : request.messages) {
    if (m.role != Role::human) continue;
    for (const auto& line : split_lines(m.text)) {
      if (starts_with(line, marker::ground_truth)) truth = trim(line.substr(marker::ground_truth.size()));
      if (starts_with(line, marker::answer)) answer = trim(line.substr(marker::answer.size()));
    }
  }
  const auto a = to_lower(answer);
  std::string category = "wrong";
  if (a.find("no record") != std::string::npos || a.find("forgot") != std::string::npos) {
    category = "forgotten";
  } else if (a.empty() || a.find("do not know") != std::string::npos) {
    category = "no-answer";
  } else if (!truth.empty() && a.find(to_lower(truth)) != std::string::npos) {
    category = "correct";
  }
  return "Reasoning: Compared with the ground truth.\nCategory: " + category;
}

std::string ScriptedBackend::summarize(const LmRequest& request) const {
  const auto* m = find_message(request, marker::items);
  std::vector<std::string> lines;
  if (m) {
    for (const auto& line : split_lines(m->text)) {
      if (starts_with(line, "- ")) lines.push_back(item_phrase(line.substr(2)));
    }
  }
  const auto keep = rule_terms(request, marker::summary_rules, config_.vocabulary);
  return "Summary: " + condense_lines(lines, keep, config_.summary_limit);
}

}  // namespace emtree
