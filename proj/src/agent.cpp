#include "emtree/agent.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <nlohmann/json.hpp>

#include "emtree/log.hpp"
#include "emtree/prompts.hpp"

namespace emtree {

std::string QaResult::trace_lines() const {
  std::string out;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    nlohmann::ordered_json j;
    j["step"] = i + 1;
    j["action"] = trace[i].action;
    j["observation"] = trace[i].observation;
    j["prompt_tokens"] = trace[i].usage.prompt_tokens;
    j["completion_tokens"] = trace[i].usage.completion_tokens;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<std::string> search_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<SearchHit> lexical_search(const HistoryTree& tree, std::string_view keywords, std::size_t limit) {
  const auto query = search_tokens(keywords);
  const std::set<std::string> wanted(query.begin(), query.end());
  struct Scored {
    SearchHit hit;
    Timestamp start;
    std::size_t order;
  };
  std::vector<Scored> scored;
  std::size_t order = 0;
  visit(tree.root, [&](const TreeNode& node, const TreeNode* parent) {
    if (parent == nullptr || node.placeholder) return;
    const auto tokens = search_tokens(node.summary);
    const std::set<std::string> have(tokens.begin(), tokens.end());
    std::size_t score = 0;
    for (const auto& w : wanted) score += have.count(w);
    if (score > 0) scored.push_back({{node.id, score}, node.span.start, order});
    ++order;
  });
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.hit.score != b.hit.score) return a.hit.score > b.hit.score;
    if (a.start != b.start) return a.start > b.start;
    return a.order > b.order;
  });
  std::vector<SearchHit> out;
  for (const auto& s : scored) {
    if (out.size() >= limit) break;
    out.push_back(s.hit);
  }
  return out;
}

bool indicates_forgotten(std::string_view answer) {
  const auto a = to_lower(answer);
  return a.find("no record") != std::string::npos || a.find("forgotten") != std::string::npos ||
         a.find("forgot ") != std::string::npos;
}

namespace {

bool all_placeholders(const TreeNode& node) {
  return node.has_children() && std::all_of(node.children.begin(), node.children.end(),
                                            [](const TreeNode& c) { return c.placeholder; });
}

}  // namespace

QaResult answer_question(LmGateway& gateway, const HistoryTree& snapshot, std::string_view question,
                         Timestamp now, QaMode mode, const AgentConfig& config) {
  QaResult result;
  result.snapshot_version = snapshot.version;
  const bool search = mode == QaMode::flat;

  auto messages = render_qa_prompt({std::string{question}, now,
                                    render(snapshot.root, Audience::qa, config.view_depth), search});
  bool last_view_forgotten = all_placeholders(snapshot.root);

  for (int step = 0; step < config.max_steps; ++step) {
    AgentStep record;
    LmResponse response;
    try {
      response = gateway.complete({PromptKind::qa_agent, messages});
    } catch (const BackendUnreachable& e) {
      logger()->warn("question answering stopped: {}", e.what());
      break;
    }
    record.action = response.text;
    record.usage = response.usage;
    result.usage += response.usage;
    messages.push_back({Role::ai, response.text});

    const auto action = parse_agent_action(response.text);
    std::string observation;
    if (!action) {
      observation = std::string{marker::result_of} + "your reply:\nNo action found. Reply with expand(<id>), " +
                    (search ? "search(<keywords>), " : "") + "or answer(<text>).";
    } else if (action->type == AgentAction::Type::answer) {
      result.answer = trim(action->text);
      result.trace.push_back(std::move(record));
      result.forgotten_indicated = last_view_forgotten || indicates_forgotten(result.answer);
      return result;
    } else if (action->type == AgentAction::Type::expand) {
      const auto* node = snapshot.find(action->node);
      const auto head = std::string{marker::result_of} + "expand(" + std::to_string(action->node) + "):\n";
      if (node == nullptr || node->placeholder) {
        observation = head + "There is no node with id " + std::to_string(action->node) +
                      ". Use an id shown in brackets.";
      } else {
        observation = head + render(*node, Audience::qa, config.view_depth);
        last_view_forgotten = all_placeholders(*node);
      }
    } else if (!search) {
      observation = std::string{marker::result_of} + "search(" + action->text +
                    "):\nSearch is not available. Use expand(<id>) or answer(<text>).";
    } else {
      auto hits = lexical_search(snapshot, action->text, config.search_hits);
      std::vector<const TreeNode*> nodes;
      for (const auto& h : hits) nodes.push_back(snapshot.find(h.id));
      std::stable_sort(nodes.begin(), nodes.end(),
                       [](const TreeNode* a, const TreeNode* b) { return a->span.start < b->span.start; });
      observation = std::string{marker::result_of} + "search(" + action->text + "):";
      if (nodes.empty()) observation += "\nNo matching nodes.";
      for (const auto* n : nodes) observation += "\n" + render_line(*n, Audience::qa);
    }
    record.observation = observation;
    result.trace.push_back(std::move(record));
    messages.push_back({Role::human, std::move(observation)});
  }

  result.gave_up = true;
  result.answer = "I could not find an answer in my memory.";
  result.forgotten_indicated = last_view_forgotten;
  return result;
}

}  // namespace emtree
