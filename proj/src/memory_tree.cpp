#include "emtree/memory_tree.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "emtree/log.hpp"

namespace emtree {

NodeKind kind_for_level(int level) {
  switch (level) {
    case kSceneLevel: return NodeKind::scene;
    case kEventLevel: return NodeKind::event;
    case kGoalLevel: return NodeKind::goal;
    default: return NodeKind::higher;
  }
}

std::string_view to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::scene: return "scene";
    case NodeKind::event: return "event";
    case NodeKind::goal: return "goal";
    case NodeKind::higher: return "higher";
  }
  return "higher";
}

std::optional<NodeKind> node_kind_from_string(std::string_view text) {
  if (text == "scene") return NodeKind::scene;
  if (text == "event") return NodeKind::event;
  if (text == "goal") return NodeKind::goal;
  if (text == "higher") return NodeKind::higher;
  return std::nullopt;
}

const std::string* SceneInstant::attribute(std::string_view key) const {
  for (const auto& [k, v] : attributes) {
    if (k == key) return &v;
  }
  return nullptr;
}

std::string describe_scene(const SceneInstant& scene) {
  std::string head;
  std::string rest;
  for (const auto& [key, value] : scene.attributes) {
    if (key == "action" && head.empty()) {
      head = value;
      continue;
    }
    if (!rest.empty()) rest += '\n';
    rest += key + ": " + value;
  }
  if (head.empty()) {
    const auto nl = rest.find('\n');
    head = rest.substr(0, nl);
    rest = nl == std::string::npos ? std::string{} : rest.substr(nl + 1);
  }
  return rest.empty() ? head : head + '\n' + rest;
}

namespace {

std::string first_line_of(std::string_view text) {
  const auto nl = text.find('\n');
  return std::string{text.substr(0, nl)};
}

std::string truncate_line(std::string line) {
  if (line.size() > kShortSummaryLimit) {
    line.resize(kShortSummaryLimit);
    // Do not leave a dangling partial UTF-8 sequence.
    while (!line.empty() && (static_cast<unsigned char>(line.back()) & 0xC0) == 0x80) line.pop_back();
    if (!line.empty() && (static_cast<unsigned char>(line.back()) & 0x80) != 0) line.pop_back();
  }
  return line;
}

std::string span_text(const TimeSpan& span) {
  return span.start == span.end ? format_timestamp(span.start) : format_span(span);
}

template <typename Node, typename Fn>
Node* find_impl(Node& node, NodeId id, Fn&& on_parent, Node* parent) {
  if (node.id == id) {
    on_parent(parent);
    return &node;
  }
  for (auto& child : node.children) {
    if (auto* hit = find_impl(child, id, on_parent, &node)) return hit;
  }
  return nullptr;
}

}  // namespace

std::string TreeNode::first_line() const {
  return placeholder ? short_summary : first_line_of(summary);
}

HistoryTree::HistoryTree(int depth) : max_depth(depth) {
  root.id = 0;
  root.level = depth;
  root.kind = NodeKind::higher;
}

const TreeNode* HistoryTree::find(NodeId id) const {
  return find_impl(root, id, [](const TreeNode*) {}, static_cast<const TreeNode*>(nullptr));
}

TreeNode* HistoryTree::find(NodeId id) {
  return find_impl(root, id, [](TreeNode*) {}, static_cast<TreeNode*>(nullptr));
}

const TreeNode* HistoryTree::parent_of(NodeId id) const {
  const TreeNode* parent = nullptr;
  find_impl(root, id, [&](const TreeNode* p) { parent = p; }, static_cast<const TreeNode*>(nullptr));
  return parent;
}

TreeNode forget_node(const TreeNode& node) {
  TreeNode out;
  out.id = node.id;
  out.level = node.level;
  out.kind = node.kind;
  out.span = node.span;
  out.expiration = node.expiration;
  out.placeholder = true;
  if (node.placeholder) {
    out.short_summary = node.short_summary;
  } else {
    if (node.summary.empty()) {
      logger()->warn("forgetting node {} with an empty summary", node.id);
    }
    out.short_summary = truncate_line(first_line_of(node.summary));
  }
  return out;
}

TreeNode& merge_adjacent_placeholders(TreeNode& parent) {
  std::vector<TreeNode> merged;
  merged.reserve(parent.children.size());
  for (auto& child : parent.children) {
    if (child.placeholder && !merged.empty() && merged.back().placeholder) {
      auto& run = merged.back();
      run.span = run.span.hull(child.span);
      run.short_summary = truncate_line(run.short_summary + std::string{kPlaceholderJoin} +
                                        child.short_summary);
      run.expiration = std::max(run.expiration, child.expiration);
      continue;
    }
    merged.push_back(std::move(child));
  }
  parent.children = std::move(merged);
  return parent;
}

std::string render_line(const TreeNode& node, Audience audience) {
  if (node.placeholder) {
    std::string out = "forgotten: " + span_text(node.span);
    if (audience == Audience::summarizer && !node.short_summary.empty()) {
      out += ": " + node.short_summary;
    }
    return out;
  }
  std::string out = "[" + std::to_string(node.id) + "] " + span_text(node.span);
  if (node.has_children()) {
    out += " (" + std::to_string(node.children.size()) + " items)";
  }
  out += ": ";
  std::string_view text = node.summary;
  bool first = true;
  while (true) {
    const auto nl = text.find('\n');
    if (!first) out += "\n  ";
    out += text.substr(0, nl);
    first = false;
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  return out;
}

std::string render_stub(const TreeNode& node, Audience audience) {
  if (node.placeholder) return render_line(node, audience);
  return "[" + std::to_string(node.id) + "] " + node.first_line();
}

namespace {

void render_into(std::ostringstream& out, const TreeNode& node, Audience audience, int depth_limit,
                 int indent) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  auto line = render_line(node, audience);
  for (std::size_t pos = 0; (pos = line.find('\n', pos)) != std::string::npos; pos += 1 + pad.size()) {
    line.insert(pos + 1, pad);
  }
  out << pad << line << '\n';
  if (depth_limit <= 0) return;
  for (const auto& child : node.children) {
    if (depth_limit == 1) {
      out << pad << "  " << render_stub(child, audience) << '\n';
    } else {
      render_into(out, child, audience, depth_limit - 1, indent + 1);
    }
  }
}

}  // namespace

std::string render(const TreeNode& node, Audience audience, int depth_limit) {
  std::ostringstream out;
  render_into(out, node, audience, depth_limit, 0);
  return out.str();
}

HistoryTree snapshot(const HistoryTree& tree) { return tree; }

std::size_t count_nodes(const HistoryTree& tree, int min_level) {
  std::size_t count = 0;
  visit(tree.root, [&](const TreeNode& node, const TreeNode* parent) {
    if (parent != nullptr && !node.placeholder && node.level >= min_level) ++count;
  });
  return count;
}

void visit(const TreeNode& node, const std::function<void(const TreeNode&, const TreeNode*)>& fn) {
  struct Frame {
    const TreeNode* node;
    const TreeNode* parent;
  };
  std::vector<Frame> stack{{&node, nullptr}};
  while (!stack.empty()) {
    const auto frame = stack.back();
    stack.pop_back();
    fn(*frame.node, frame.parent);
    for (auto it = frame.node->children.rbegin(); it != frame.node->children.rend(); ++it) {
      stack.push_back({&*it, frame.node});
    }
  }
}

namespace {

class Fnv {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 1099511628211ULL;
    }
  }
  void text(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void i64(std::int64_t v) { bytes(&v, sizeof v); }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 14695981039346656037ULL;
};

void hash_node(Fnv& h, const TreeNode& node, bool with_identity) {
  if (with_identity) {
    h.u64(node.id);
    h.i64(node.expiration.seconds);
    h.u64(node.never_expires ? 1 : 0);
  }
  h.i64(node.level);
  h.i64(static_cast<int>(node.kind));
  h.i64(node.span.start.seconds);
  h.i64(node.span.end.seconds);
  h.text(node.summary);
  h.u64(node.placeholder ? 1 : 0);
  h.text(node.short_summary);
  if (node.scene) {
    h.i64(node.scene->at.seconds);
    h.text(node.scene->source_id);
    for (const auto& [k, v] : node.scene->attributes) {
      h.text(k);
      h.text(v);
    }
  }
  h.u64(node.children.size());
  for (const auto& child : node.children) hash_node(h, child, with_identity);
}

}  // namespace

std::uint64_t structural_hash(const TreeNode& node) {
  Fnv h;
  hash_node(h, node, true);
  return h.value();
}

std::uint64_t structural_hash(const HistoryTree& tree) {
  Fnv h;
  h.u64(tree.version);
  h.i64(tree.max_depth);
  hash_node(h, tree.root, true);
  return h.value();
}

std::uint64_t shape_hash(const TreeNode& node) {
  Fnv h;
  hash_node(h, node, false);
  return h.value();
}

void normalize_spans(TreeNode& node) {
  if (node.placeholder || node.children.empty()) return;
  for (auto& child : node.children) normalize_spans(child);
  TimeSpan span = node.children.front().span;
  for (const auto& child : node.children) span = span.hull(child.span);
  node.span = span;
}

std::vector<std::string> check_invariants(const HistoryTree& tree) {
  std::vector<std::string> problems;
  std::set<NodeId> seen;
  auto report = [&](const TreeNode& node, const std::string& what) {
    problems.push_back("node " + std::to_string(node.id) + ": " + what);
  };
  visit(tree.root, [&](const TreeNode& node, const TreeNode* parent) {
    if (!seen.insert(node.id).second) report(node, "duplicate id");
    if (!node.span.valid()) report(node, "span start after end");
    if (parent != nullptr) {
      if (node.level != parent->level - 1) report(node, "level is not parent level - 1");
      if (node.level < 0 || node.level >= tree.max_depth) report(node, "level out of range");
      if (!node.placeholder && node.kind != kind_for_level(node.level)) report(node, "kind mismatch");
    }
    if (node.placeholder) {
      if (!node.children.empty()) report(node, "placeholder with children");
      if (node.short_summary.find('\n') != std::string::npos) report(node, "multi-line placeholder");
      return;
    }
    if (parent != nullptr && node.level == kSceneLevel) {
      if (!node.scene) report(node, "scene node without scene payload");
      if (!node.children.empty()) report(node, "scene node with children");
    }
    if (parent != nullptr && node.level > kSceneLevel && node.children.empty()) {
      report(node, "summary node without children");
    }
    if (node.children.empty()) return;
    TimeSpan hull = node.children.front().span;
    for (std::size_t i = 0; i < node.children.size(); ++i) {
      const auto& c = node.children[i];
      hull = hull.hull(c.span);
      if (i == 0) continue;
      const auto& prev = node.children[i - 1];
      if (c.span.start < prev.span.start) report(node, "children out of time order");
      if (c.span.start < prev.span.end) report(node, "overlapping sibling spans");
      if (c.placeholder && prev.placeholder) report(node, "adjacent placeholders");
    }
    if (parent != nullptr && hull != node.span) report(node, "span does not match children");
  });
  return problems;
}

}  // namespace emtree
