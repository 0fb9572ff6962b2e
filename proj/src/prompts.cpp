#include "emtree/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <regex>

#include <nlohmann/json.hpp>

namespace emtree {

std::string trim(std::string_view s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return std::string{s};
}

std::vector<std::string> split_lines(std::string_view s) {
  std::vector<std::string> out;
  while (true) {
    const auto nl = s.find('\n');
    out.emplace_back(s.substr(0, nl));
    if (nl == std::string_view::npos) break;
    s.remove_prefix(nl + 1);
  }
  return out;
}

std::string to_lower(std::string_view s) {
  std::string out{s};
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

namespace {

Message system(std::string text) { return {Role::system, std::move(text)}; }
Message human(std::string text) { return {Role::human, std::move(text)}; }
Message ai(std::string text) { return {Role::ai, std::move(text)}; }

std::string answer_format(std::string_view last_line) {
  return "Answer like this:\nReasoning: ...\n" + std::string{last_line};
}

std::string item_line(const PresentedItem& item) {
  return "- " + std::to_string(item.index) + ": " + item.text;
}

}  // namespace

std::vector<Message> render_grouping_prompt(const GroupingBindings& b) {
  if (b.current.empty()) throw MissingBinding("grouping prompt needs at least one current item");
  std::vector<Message> m;
  m.push_back(system(
      "You keep the memory of a household robot as groups of the things it did and saw. "
      "New observations arrive over time and you decide how they fit into the existing groups: "
      "they may extend the most recent group, open a new group, or cause the most recent groups "
      "to be rearranged. Pay attention to the timestamps and keep items that are far apart in "
      "time in separate groups. Every group stands for one concrete step or subtask such as "
      "\"rinse the mug\" or \"slice the bread and put it on the plate\", never a vague category "
      "like \"kitchen work\". Do not copy the summary of one group into another."));
  m.push_back(human(
      "The existing groups are listed in time order. Each group starts with a header line and "
      "lists its items below it. Items are numbered backwards, so the newest item has the "
      "smallest number:\n"
      "# (range) summary of group 1\n"
      "- n: item\n"
      "- n-1: item\n"
      "# (range) summary of group 2\n"
      "- n-2: item\n"
      "..."));
  m.push_back(human("The following examples show the length and style expected for a summary."));
  m.push_back(human(std::string{marker::items} +
                    "\nNavigate(Sink), Pickup(Mug_1), ToggleOn(Faucet), Place(Mug_1, Sink), "
                    "ToggleOff(Faucet)"));
  m.push_back(ai("Summary: I rinsed the mug under the faucet."));
  m.push_back(human(std::string{marker::items} +
                    "\nPickup(Bread_0), Slice(Bread_0), Pickup(Bread_0_Slice_2), "
                    "Place(Bread_0_Slice_2, Plate_1)"));
  m.push_back(ai("Summary: I sliced the bread and put one slice on the plate."));
  if (b.rules && !b.rules->empty()) {
    m.push_back(human(std::string{marker::summary_rules} + "\n" + *b.rules +
                      "\nKeep the details these rules ask for in the summaries."));
  }

  std::string previous{marker::previous};
  if (b.previous.empty()) previous += "\n(none)";
  for (const auto& g : b.previous) {
    if (g.items.empty()) continue;
    previous += "\n# (" + std::to_string(g.items.front().index) + " - " +
                std::to_string(g.items.back().index) + ") " + g.summary;
    for (const auto& item : g.items) previous += "\n" + item_line(item);
  }
  m.push_back(human(std::move(previous)));

  std::string current{marker::current};
  for (const auto& item : b.current) current += "\n" + item_line(item);
  m.push_back(human(std::move(current)));

  m.push_back(human(
      "Decide how the current items join the existing groups. Reply with a JSON object that "
      "maps an item range to a short summary, listing only groups that are new or change. "
      "For example {\"3-0\": \"...\"} adds the newest item 0 to the group that ends with item 1, "
      "{\"0\": \"...\"} opens a new group with item 0, and {\"5-3\": \"...\", \"2-0\": \"...\"} "
      "regroups recent items. A summary must describe exactly the items of its group. Keep groups "
      "small and focused on a single subtask, merge neighbouring groups only when they describe "
      "the same subtask, and write from the robot's first-person point of view."));
  m.push_back(human(answer_format("JSON: ...")));
  return m;
}

std::vector<Message> render_relevance_prompt(const RelevanceBindings& b) {
  if (b.item.empty()) throw MissingBinding("relevance prompt needs the expired item");
  std::vector<Message> m;
  m.push_back(system(
      "You look after the long-term memory of a robot. Memories have a limited lifetime and "
      "expired ones are deleted unless they still matter. Judge whether the expired item shown "
      "below should be kept a while longer, following the user's rules. The parent item only "
      "gives context and is not being judged. When no rule asks to keep the item, answer 0 so it "
      "is forgotten."));
  m.push_back(human(std::string{marker::relevance_rules} + "\n" + b.rules_block));
  std::string item = std::string{marker::expired_item} + "\n" + b.item + "\nContext:\n" +
                     std::string{marker::parent_item} + " " + (b.parent.empty() ? "(none)" : b.parent) +
                     "\n" + std::string{marker::now} + " " + format_timestamp(b.now);
  m.push_back(human(std::move(item)));
  m.push_back(human(
      "Rate how much longer the item should be kept. 0 forgets it now, larger whole numbers keep "
      "it longer, and \"inf\" keeps it for good."));
  m.push_back(human(answer_format("Relevance: <number>")));
  return m;
}

std::vector<Message> render_rule_learning_prompt(const RuleLearningBindings& b) {
  if (trim(b.feedback).empty()) throw MissingBinding("rule learning needs non-empty feedback");
  std::vector<Message> m;
  m.push_back(system(
      "You keep a list of rules that tell a robot which of its memories are worth keeping. The "
      "user has just given feedback. Change the list so that it reflects the feedback: add, edit "
      "or delete rules as needed and merge rules that say nearly the same thing. Keep every rule "
      "short and specific and do not invent details the user did not mention. Copy rules that "
      "are unrelated to the feedback unchanged."));
  std::string rules{marker::existing_rules};
  if (b.rules.empty()) rules += "\n(no rules yet)";
  for (std::size_t i = 0; i < b.rules.size(); ++i) {
    rules += "\n" + std::to_string(i + 1) + ". " + b.rules[i];
  }
  m.push_back(human(std::move(rules)));
  m.push_back(human(std::string{marker::feedback} + " \"" + trim(b.feedback) + "\""));
  m.push_back(human("Produce a modified set of rules as a numbered list with each item on a new line."));
  return m;
}

std::vector<Message> render_qa_prompt(const QaBindings& b) {
  if (trim(b.question).empty()) throw MissingBinding("qa prompt needs a question");
  std::string sys =
      "You are a robot answering questions about your own past by browsing your memory. The "
      "memory is a tree of summaries. Each line shows a node id in brackets, the time span, the "
      "number of child items and a summary; short lines only show the id and the first summary "
      "line. A line starting with \"forgotten:\" marks a period whose details were deleted. "
      "Reply with exactly one action per turn:\n"
      "expand(<id>) shows the children of a node\n";
  if (b.search_enabled) sys += "search(<keywords>) lists the nodes that best match the keywords\n";
  sys += "answer(<text>) gives your final answer\n"
         "If the details you need were forgotten, say that there is no record of them.";
  std::vector<Message> m;
  m.push_back(system(std::move(sys)));
  m.push_back(human(std::string{marker::question} + " " + trim(b.question) + "\n" +
                    std::string{marker::now} + " " + format_timestamp(b.now) + "\n" +
                    std::string{marker::memory} + "\n" + b.memory));
  m.push_back(human(answer_format("Action: <action>")));
  return m;
}

std::vector<Message> render_routing_prompt(const RoutingBindings& b) {
  if (trim(b.utterance).empty()) throw MissingBinding("routing prompt needs an utterance");
  std::vector<Message> m;
  m.push_back(system(
      "You run the conversation of a robot that has a long-term memory. For every user utterance "
      "pick one call. Use " + std::string{kAnswerQuestionFn} +
      "(<question>) when the user asks about the robot's past. Use " + std::string{kFeedbackFn} +
      "(<feedback>) when the user says what the robot should have remembered or may forget. "
      "Use " + std::string{kReplyFn} + "(<text>) for everything else. Rewrite the argument so "
      "that it can be understood without the rest of the conversation."));
  std::string dialog{marker::recent_dialog};
  if (b.context.empty()) dialog += "\n(none)";
  for (const auto& [who, text] : b.context) dialog += "\n" + who + ": " + text;
  dialog += "\n" + std::string{marker::utterance} + " " + trim(b.utterance);
  m.push_back(human(std::move(dialog)));
  m.push_back(human(answer_format("Call: <function>(<argument>)")));
  return m;
}

std::vector<Message> render_judge_prompt(const JudgeBindings& b) {
  if (trim(b.question).empty()) throw MissingBinding("judge prompt needs a question");
  std::vector<Message> m;
  m.push_back(system(
      "You grade a robot's answers about its own past. Compare the answer with the ground truth "
      "and choose one category: correct, partially-correct (close but imprecise, for example a "
      "time off by a few minutes), wrong, no-answer (the robot gave up), or forgotten (the robot "
      "says the details were forgotten or that there is no record)."));
  m.push_back(human(std::string{marker::question} + " When did you last water the plants?\n" +
                    std::string{marker::ground_truth} + " 2024/05/02 08:15\n" +
                    std::string{marker::answer} + " I watered them on 2024/05/02 at 08:15."));
  m.push_back(ai("Reasoning: Same day and minute.\nCategory: correct"));
  m.push_back(human(std::string{marker::question} + " To where did you bring the cup?\n" +
                    std::string{marker::ground_truth} + " Sink\n" + std::string{marker::answer} +
                    " There is no record of me carrying a cup."));
  m.push_back(ai("Reasoning: The robot states the memory is gone.\nCategory: forgotten"));
  m.push_back(human(std::string{marker::question} + " " + b.question + "\n" +
                    std::string{marker::ground_truth} + " " + b.ground_truth + "\n" +
                    std::string{marker::answer} + " " + b.hypothesis));
  m.push_back(human(answer_format("Category: <category>")));
  return m;
}

std::vector<Message> render_summarize_prompt(const SummarizeBindings& b) {
  if (b.items.empty()) throw MissingBinding("summarize prompt needs items");
  std::vector<Message> m;
  m.push_back(system(
      "Summarize the listed memory items of a robot in one or two sentences from its own "
      "point of view. Name concrete objects and places."));
  if (b.rules && !b.rules->empty()) {
    m.push_back(human(std::string{marker::summary_rules} + "\n" + *b.rules));
  }
  std::string items{marker::items};
  for (const auto& item : b.items) items += "\n- " + item;
  m.push_back(human(std::move(items)));
  m.push_back(human("Answer like this:\nSummary: ..."));
  return m;
}

// ---- parsing ----------------------------------------------------------------

namespace {

std::string_view after_last(std::string_view text, std::string_view key) {
  const auto pos = text.rfind(key);
  if (pos == std::string_view::npos) return {};
  return text.substr(pos + key.size());
}

// Extracts the first balanced {...} block, honouring JSON string quoting.
std::optional<std::string_view> first_object(std::string_view text) {
  const auto open = text.find('{');
  if (open == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') in_string = true;
    if (c == '{') ++depth;
    if (c == '}' && --depth == 0) return text.substr(open, i - open + 1);
  }
  return std::nullopt;
}

std::optional<int> parse_int(std::string_view s) {
  const auto t = trim(s);
  int v = 0;
  const auto* end = t.data() + t.size();
  const auto [ptr, ec] = std::from_chars(t.data(), end, v);
  if (ec != std::errc{} || ptr != end || t.empty()) return std::nullopt;
  return v;
}

}  // namespace

std::optional<std::vector<GroupingDirective>> parse_grouping(std::string_view response) {
  auto tail = after_last(response, "JSON:");
  auto object = first_object(tail.empty() ? response : tail);
  if (!object) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*object);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (!j.is_object()) return std::nullopt;
  std::vector<GroupingDirective> out;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) return std::nullopt;
    GroupingDirective d;
    d.summary = value.get<std::string>();
    const auto dash = key.find('-');
    const auto high = parse_int(std::string_view{key}.substr(0, dash));
    const auto low =
        dash == std::string::npos ? high : parse_int(std::string_view{key}.substr(dash + 1));
    if (!high || !low) return std::nullopt;
    d.high = *high;
    d.low = *low;
    out.push_back(std::move(d));
  }
  return out;
}

RelevanceScore RelevanceScore::finite(long long v) {
  return {false, static_cast<int>(std::clamp<long long>(v, 0, 100))};
}

std::optional<RelevanceScore> parse_relevance(std::string_view response) {
  const auto pos = response.rfind("Relevance:");
  if (pos == std::string_view::npos) return std::nullopt;
  auto rest = trim(response.substr(pos + 10));
  const auto word_end = rest.find_first_of(" \n\t.,;");
  const auto word = to_lower(rest.substr(0, word_end));
  if (word == "inf" || word == "infinite" || word == "infinity" || word == "\"inf\"") {
    return RelevanceScore::infinity();
  }
  static const std::regex number(R"(^-?\d+)");
  std::smatch m;
  if (std::regex_search(word, m, number)) return RelevanceScore::finite(std::stoll(m.str()));
  return std::nullopt;
}

std::optional<std::vector<std::string>> parse_numbered_list(std::string_view response) {
  static const std::regex item(R"(^\s*\d+\s*[.)]\s+(.*\S)\s*$)");
  std::vector<std::string> out;
  for (const auto& line : split_lines(response)) {
    std::smatch m;
    if (std::regex_match(line, m, item)) out.push_back(m[1].str());
  }
  if (out.empty()) return std::nullopt;
  return out;
}

std::optional<AgentAction> parse_agent_action(std::string_view response) {
  auto segment = after_last(response, "Action:");
  if (segment.empty()) segment = response;
  struct Candidate {
    std::size_t pos;
    AgentAction::Type type;
    std::string_view key;
  };
  std::vector<Candidate> found;
  for (const auto& [type, key] : {std::pair{AgentAction::Type::expand, std::string_view{"expand("}},
                                  std::pair{AgentAction::Type::search, std::string_view{"search("}},
                                  std::pair{AgentAction::Type::answer, std::string_view{"answer("}}}) {
    const auto pos = segment.find(key);
    if (pos != std::string_view::npos) found.push_back({pos, type, key});
  }
  if (found.empty()) return std::nullopt;
  const auto first = *std::min_element(found.begin(), found.end(),
                                       [](const auto& a, const auto& b) { return a.pos < b.pos; });
  auto args = segment.substr(first.pos + first.key.size());
  const auto close = first.type == AgentAction::Type::answer ? args.rfind(')') : args.find(')');
  if (close == std::string_view::npos) return std::nullopt;
  args = args.substr(0, close);

  AgentAction action;
  action.type = first.type;
  if (first.type == AgentAction::Type::expand) {
    std::string digits;
    for (const char c : args) {
      if (std::isdigit(static_cast<unsigned char>(c))) digits += c;
    }
    if (digits.empty()) return std::nullopt;
    action.node = std::stoull(digits);
  } else {
    action.text = trim(args);
    if (action.text.empty()) return std::nullopt;
  }
  return action;
}

std::optional<RouteDecision> parse_route(std::string_view response) {
  auto segment = after_last(response, "Call:");
  if (segment.empty()) segment = response;
  const std::pair<std::string_view, RouteDecision::Type> functions[] = {
      {kAnswerQuestionFn, RouteDecision::Type::question},
      {kFeedbackFn, RouteDecision::Type::feedback},
      {kReplyFn, RouteDecision::Type::direct},
  };
  for (const auto& [fn, type] : functions) {
    const auto pos = segment.find(std::string{fn} + "(");
    if (pos == std::string_view::npos) continue;
    auto args = segment.substr(pos + fn.size() + 1);
    const auto close = args.rfind(')');
    if (close == std::string_view::npos) return std::nullopt;
    auto text = trim(args.substr(0, close));
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
      text = text.substr(1, text.size() - 2);
    }
    return RouteDecision{type, text};
  }
  return std::nullopt;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::correct: return "correct";
    case Verdict::partially_correct: return "partially-correct";
    case Verdict::wrong: return "wrong";
    case Verdict::no_answer: return "no-answer";
    case Verdict::forgotten: return "forgotten";
  }
  return "wrong";
}

std::optional<Verdict> verdict_from_string(std::string_view text) {
  auto t = to_lower(trim(text));
  std::replace(t.begin(), t.end(), ' ', '-');
  std::replace(t.begin(), t.end(), '_', '-');
  if (t == "correct") return Verdict::correct;
  if (t == "partially-correct" || t == "partial" || t == "partially") return Verdict::partially_correct;
  if (t == "wrong" || t == "incorrect") return Verdict::wrong;
  if (t == "no-answer" || t == "none") return Verdict::no_answer;
  if (t == "forgotten" || t == "forgotten-indicated") return Verdict::forgotten;
  return std::nullopt;
}

std::optional<Verdict> parse_judge(std::string_view response) {
  const auto tail = after_last(response, "Category:");
  if (tail.empty()) return std::nullopt;
  const auto line = split_lines(tail).front();
  auto word = trim(line);
  while (!word.empty() && (word.back() == '.' || word.back() == ',')) word.pop_back();
  return verdict_from_string(word);
}

std::optional<std::string> parse_summary(std::string_view response) {
  auto tail = after_last(response, "Summary:");
  auto text = trim(tail.empty() ? response : tail);
  if (text.empty()) return std::nullopt;
  return text;
}

}  // namespace emtree
