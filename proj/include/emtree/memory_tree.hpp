#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emtree/time.hpp"

namespace emtree {

using NodeId = std::uint64_t;

enum class NodeKind { scene, event, goal, higher };

NodeKind kind_for_level(int level);
std::string_view to_string(NodeKind kind);
std::optional<NodeKind> node_kind_from_string(std::string_view text);

// Level 0 holds scene instants, 1 events, 2 goals, 3 and up higher-level summaries.
inline constexpr int kSceneLevel = 0;
inline constexpr int kEventLevel = 1;
inline constexpr int kGoalLevel = 2;

using AttributeList = std::vector<std::pair<std::string, std::string>>;

struct SceneInstant {
  Timestamp at;
  AttributeList attributes;  // ordered: action, speech, objects, location, ...
  std::string source_id;

  const std::string* attribute(std::string_view key) const;
  bool operator==(const SceneInstant&) const = default;
};

// Renders the scene's attributes as a summary; the first line is the main activity.
std::string describe_scene(const SceneInstant& scene);

struct TreeNode {
  NodeId id = 0;
  int level = 0;
  NodeKind kind = NodeKind::scene;
  TimeSpan span;
  std::string summary;
  std::vector<TreeNode> children;
  Timestamp expiration;
  bool never_expires = false;

  // Tombstone of a forgotten node: keeps span and a single-line short summary.
  bool placeholder = false;
  std::string short_summary;

  std::optional<SceneInstant> scene;  // level 0 only

  bool operator==(const TreeNode&) const = default;

  bool has_children() const { return !children.empty(); }
  std::string first_line() const;
};

struct HistoryTree {
  TreeNode root;  // synthetic container, level == max_depth, never forgotten
  std::uint64_t version = 0;
  int max_depth = 8;
  NodeId next_id = 1;

  HistoryTree() = default;
  explicit HistoryTree(int depth);

  bool empty() const { return root.children.empty(); }
  NodeId allocate_id() { return next_id++; }

  const TreeNode* find(NodeId id) const;
  TreeNode* find(NodeId id);
  // Parent of the node with `id`, or nullptr when the id is unknown or the root.
  const TreeNode* parent_of(NodeId id) const;
};

inline constexpr std::size_t kShortSummaryLimit = 200;
inline constexpr std::string_view kPlaceholderJoin = "; ";

// Tombstone for `node`: same span and level, first summary line, no children.
TreeNode forget_node(const TreeNode& node);

// Collapses every maximal run of consecutive placeholder children into one.
TreeNode& merge_adjacent_placeholders(TreeNode& parent);

enum class Audience { qa, summarizer };

// One line per node. Nodes deeper than `depth_limit` levels below `node` are
// omitted; the last rendered level appears as "[id] <first line>" stubs.
std::string render(const TreeNode& node, Audience audience, int depth_limit);
std::string render_line(const TreeNode& node, Audience audience);
std::string render_stub(const TreeNode& node, Audience audience);

HistoryTree snapshot(const HistoryTree& tree);

// Non-placeholder nodes with level >= min_level, root excluded.
std::size_t count_nodes(const HistoryTree& tree, int min_level);

std::uint64_t structural_hash(const TreeNode& node);
std::uint64_t structural_hash(const HistoryTree& tree);
// Hash that ignores node ids and expirations; compares shape and content only.
std::uint64_t shape_hash(const TreeNode& node);

// Recomputes spans of non-leaf nodes from their children, bottom-up.
void normalize_spans(TreeNode& node);

// Returns one message per violated structural invariant (empty when valid).
std::vector<std::string> check_invariants(const HistoryTree& tree);

// Pre-order traversal; the callback receives the node and its parent (nullptr for the root).
void visit(const TreeNode& node, const std::function<void(const TreeNode&, const TreeNode*)>& fn);

}  // namespace emtree
