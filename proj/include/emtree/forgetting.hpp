#pragma once

#include <atomic>
#include <cstddef>
#include <optional>

#include "emtree/builder.hpp"
#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"
#include "emtree/prompts.hpp"
#include "emtree/rules.hpp"

namespace emtree {

struct SweepReport {
  std::size_t forgotten = 0;
  std::size_t extended = 0;
  std::size_t visited = 0;
  std::size_t calls = 0;
  TokenUsage usage;
  bool interrupted = false;
  bool changed = false;
};

struct SweepOptions {
  // Without relevance estimation every expired node is forgotten (pure time decay).
  bool use_relevance = true;
  std::optional<std::size_t> max_calls;  // running out counts as an interruption
};

inline bool is_expired(const TreeNode& node, Timestamp now) {
  return !node.placeholder && !node.never_expires && node.expiration < now;
}

// One relevance-estimation call. Unparseable or failed calls give 0.
RelevanceScore estimate_relevance(LmGateway& gateway, const TreeNode& node, const TreeNode* parent,
                                  const RuleSet& rules, Timestamp now, TokenUsage* usage = nullptr);

class ForgettingEngine {
 public:
  ForgettingEngine(LmGateway* gateway, BuilderConfig config);

  // Top-down pass over `tree`. `interrupt` is polled before every model call; when it is set
  // the pass stops, leaving a structurally valid tree, and reports interrupted = true.
  // Bumps the tree version when anything changed.
  SweepReport sweep(HistoryTree& tree, Timestamp now, const RuleSet& rules,
                    const std::atomic<bool>* interrupt = nullptr, SweepOptions options = {});

 private:
  struct Pass;
  void sweep_children(TreeNode& parent, Pass& pass);

  LmGateway* gateway_;
  BuilderConfig config_;
};

// 1.0 when every leaf intersecting `span` is a placeholder, 0.0 when some leaf survives,
// nullopt when no leaf intersects the span.
std::optional<double> forgotten_ratio(const HistoryTree& tree, const TimeSpan& span);

}  // namespace emtree
