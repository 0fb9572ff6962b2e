#include "emtree/forgetting.hpp"

#include "emtree/log.hpp"

namespace emtree {

RelevanceScore estimate_relevance(LmGateway& gateway, const TreeNode& node, const TreeNode* parent,
                                  const RuleSet& rules, Timestamp now, TokenUsage* usage) {
  RelevanceBindings b;
  b.rules_block = render_rules(rules);
  b.item = item_text(node);
  if (parent != nullptr && parent->id != 0) b.parent = item_text(*parent);
  b.now = now;
  try {
    const auto response = gateway.complete({PromptKind::relevance_estimation, render_relevance_prompt(b)});
    if (usage) *usage += response.usage;
    if (auto score = parse_relevance(response.text)) return *score;
    logger()->debug("unparseable relevance for node {}", node.id);
  } catch (const BackendUnreachable& e) {
    logger()->warn("relevance estimation failed: {}", e.what());
  }
  return RelevanceScore::finite(0);
}

struct ForgettingEngine::Pass {
  Timestamp now;
  const RuleSet& rules;
  const std::atomic<bool>* interrupt;
  SweepOptions options;
  SweepReport report;
};

ForgettingEngine::ForgettingEngine(LmGateway* gateway, BuilderConfig config)
    : gateway_(gateway), config_(std::move(config)) {}

void ForgettingEngine::sweep_children(TreeNode& parent, Pass& pass) {
  for (auto& child : parent.children) {
    if (pass.report.interrupted) break;
    if (child.placeholder) continue;
    ++pass.report.visited;

    if (is_expired(child, pass.now)) {
      auto alpha = RelevanceScore::finite(0);
      if (pass.options.use_relevance && gateway_ != nullptr) {
        const bool stop = (pass.interrupt && pass.interrupt->load()) ||
                          (pass.options.max_calls && pass.report.calls >= *pass.options.max_calls);
        if (stop) {
          pass.report.interrupted = true;
          break;
        }
        ++pass.report.calls;
        alpha = estimate_relevance(*gateway_, child, &parent, pass.rules, pass.now, &pass.report.usage);
      }
      if (alpha.infinite) {
        child.never_expires = true;
        ++pass.report.extended;
      } else if (alpha.value > 0) {
        child.expiration += config_.lifetime(child.level) * alpha.value;
        ++pass.report.extended;
      }
      if (is_expired(child, pass.now)) {
        child = forget_node(child);
        ++pass.report.forgotten;
        continue;
      }
    }

    if (child.has_children()) {
      sweep_children(child, pass);
      for (const auto& c : child.children) {
        child.expiration = std::max(child.expiration, c.expiration);
        child.never_expires = child.never_expires || c.never_expires;
      }
    }
  }
  merge_adjacent_placeholders(parent);
}

SweepReport ForgettingEngine::sweep(HistoryTree& tree, Timestamp now, const RuleSet& rules,
                                    const std::atomic<bool>* interrupt, SweepOptions options) {
  const auto before = structural_hash(tree.root);
  Pass pass{now, rules, interrupt, options, {}};
  sweep_children(tree.root, pass);
  pass.report.changed = structural_hash(tree.root) != before;
  if (pass.report.changed) ++tree.version;
  return pass.report;
}

std::optional<double> forgotten_ratio(const HistoryTree& tree, const TimeSpan& span) {
  bool any = false;
  bool all_forgotten = true;
  visit(tree.root, [&](const TreeNode& node, const TreeNode* parent) {
    if (parent == nullptr || node.has_children() || !node.span.intersects(span)) return;
    any = true;
    all_forgotten = all_forgotten && node.placeholder;
  });
  if (!any) return std::nullopt;
  return all_forgotten ? 1.0 : 0.0;
}

}  // namespace emtree
