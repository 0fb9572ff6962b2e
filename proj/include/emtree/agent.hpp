#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"

namespace emtree {

enum class QaMode { tree, flat };

struct AgentConfig {
  int max_steps = 12;
  int view_depth = 2;  // levels shown below the root and below an expanded node
  std::size_t search_hits = 10;
};

struct AgentStep {
  std::string action;       // raw model reply
  std::string observation;  // what the agent was shown in response
  TokenUsage usage;
};

struct QaResult {
  std::string answer;
  TokenUsage usage;
  std::vector<AgentStep> trace;
  bool gave_up = false;
  bool forgotten_indicated = false;
  std::uint64_t snapshot_version = 0;

  // One JSON line per step.
  std::string trace_lines() const;
};

struct SearchHit {
  NodeId id = 0;
  std::size_t score = 0;
};

// Lower-cased alphanumeric tokens; underscores split tokens ("Knife_0" -> knife, 0).
std::vector<std::string> search_tokens(std::string_view text);

// Ranks live non-root nodes by the number of distinct query tokens in their summary;
// ties go to the more recent node. Nodes without any overlap are left out.
std::vector<SearchHit> lexical_search(const HistoryTree& tree, std::string_view keywords,
                                      std::size_t limit = SIZE_MAX);

bool indicates_forgotten(std::string_view answer);

// Lets the model browse `snapshot` until it answers or runs out of steps. Read-only.
QaResult answer_question(LmGateway& gateway, const HistoryTree& snapshot, std::string_view question,
                         Timestamp now, QaMode mode = QaMode::tree, const AgentConfig& config = {});

}  // namespace emtree
