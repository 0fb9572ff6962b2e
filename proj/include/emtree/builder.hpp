#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"
#include "emtree/rules.hpp"

namespace emtree {

struct BuilderConfig {
  int max_depth = 8;
  // Default lifetime per level; levels past the end reuse the last entry.
  std::vector<Duration> lifetimes = {std::chrono::minutes(15), std::chrono::hours(1),
                                     std::chrono::hours(24), std::chrono::hours(24)};
  double cluster_gap_factor = 10.0;  // G
  double visibility_factor = 3.0;    // K
  double push_prevention_factor = 5.0;  // M
  // Rule-based event and goal grouping for scene streams instead of the grouping prompt.
  bool domain_levels = true;
  std::set<std::string> interaction_actions = {"Pickup", "Place", "Put", "Open", "Close", "Slice",
                                               "ToggleOn", "ToggleOff", "Cook", "Clean", "Fill",
                                               "Empty", "Drop", "Throw", "Break"};
  bool root_summary = true;

  Duration lifetime(int level) const;
  // Throws std::invalid_argument on L < 3 or a non-positive lifetime.
  void validate() const;
};

// τ = end + Δt_ℓ·γ_ℓ with γ = 1 up to level 3 and doubling per level above.
Timestamp initial_expiration(int level, Timestamp end, const BuilderConfig& config);
Timestamp initial_expiration(const TreeNode& node, const BuilderConfig& config);

// "<span>: <summary>" with continuation lines indented, as items appear in prompts.
std::string item_text(const TreeNode& node);

// Clusters over items given by span (sorted by start). `owner[i]` >= 0 marks items sharing a
// parent; a cluster boundary is never placed between two items of the same owner.
std::vector<std::vector<std::size_t>> time_based_cluster(const std::vector<TimeSpan>& spans,
                                                         Duration level_lifetime, double gap_factor,
                                                         const std::vector<int>& owner = {});

// Domain rules: a scene opens a new event when its attributes (speech aside) differ from the
// previous scene or when it carries speech.
bool starts_new_event(const SceneInstant& previous, const SceneInstant& next);
// Verb of an activity line: "Pickup(Knife_0)" -> "Pickup".
std::string action_verb(std::string_view line);

struct LevelTrace {
  int level = 0;
  Timestamp cutoff;
  std::optional<NodeId> anchor;
  std::size_t first_change = 0;
  bool changed = false;
  bool dissolved_anchor = false;
  bool prevent_push = false;
};

struct LmCallTrace {
  int level = 0;
  int cluster = 0;
  PromptKind kind = PromptKind::grouping;
  std::string outcome;  // applied directives, or the fallback note
  bool fallback = false;
  TokenUsage usage;
};

struct UpdateTrace {
  std::uint64_t version_before = 0;
  std::uint64_t version_after = 0;
  std::vector<LevelTrace> levels;
  std::vector<LmCallTrace> calls;

  // One line per LM call: level, cluster, directives, usage.
  std::string log_lines() const;
};

class TreeBuilder {
 public:
  TreeBuilder(LmGateway& gateway, BuilderConfig config);

  const BuilderConfig& config() const { return config_; }
  // Learned rules passed to the grouping and summarizing prompts; null disables them.
  void set_summary_rules(RuleSetPtr rules) { summary_rules_ = std::move(rules); }

  // Adds a time-ordered batch of scenes. Empty batches are a no-op; otherwise the tree
  // version grows by one. Throws std::invalid_argument for batches older than the tree.
  UpdateTrace update_tree(HistoryTree& tree, const std::vector<SceneInstant>& batch);

  // Regroups the children of `parents` together with `new_items` (level `level`, parentless)
  // into revised parents at level + 1, leaving clusters without new items untouched.
  std::vector<TreeNode> time_aware_group_and_summarize(HistoryTree& tree,
                                                       const std::vector<TreeNode>& parents,
                                                       std::vector<TreeNode> new_items, int level,
                                                       UpdateTrace* trace = nullptr,
                                                       int cluster_base = 0);

  // One grouping call over `parents` (whose children are presented first) and `new_items`.
  std::vector<TreeNode> group_and_summarize(HistoryTree& tree, const std::vector<TreeNode>& parents,
                                            std::vector<TreeNode> new_items, int level,
                                            UpdateTrace* trace = nullptr, int cluster = 0);

  TreeNode make_scene_node(HistoryTree& tree, const SceneInstant& scene) const;
  TreeNode make_parent(HistoryTree& tree, std::vector<TreeNode> children, int level,
                       std::string summary) const;

  // simple-summarize call with a mechanical fallback.
  std::string summarize(const std::vector<TreeNode>& items, int level, UpdateTrace* trace = nullptr);

 private:
  std::vector<TreeNode> domain_group(HistoryTree& tree, const std::vector<TreeNode>& parents,
                                     std::vector<TreeNode> new_items, int level) const;
  bool is_interaction(const TreeNode& event) const;
  bool try_prevent_push(HistoryTree& tree, int level, std::vector<TreeNode>& pending,
                        UpdateTrace& trace);
  std::optional<std::string> rules_block() const;

  LmGateway& gateway_;
  BuilderConfig config_;
  RuleSetPtr summary_rules_;
};

// Builds a tree from scratch with one batch.
HistoryTree build_tree(TreeBuilder& builder, const std::vector<SceneInstant>& scenes);

}  // namespace emtree
