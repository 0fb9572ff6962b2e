#include "emtree/builder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "emtree/log.hpp"
#include "emtree/prompts.hpp"
#include "emtree/text.hpp"

namespace emtree {

Duration BuilderConfig::lifetime(int level) const {
  if (lifetimes.empty()) return std::chrono::hours(24);
  const auto i = static_cast<std::size_t>(std::max(level, 0));
  return i < lifetimes.size() ? lifetimes[i] : lifetimes.back();
}

void BuilderConfig::validate() const {
  if (max_depth < 3) throw std::invalid_argument("max_depth must be at least 3");
  if (lifetimes.empty()) throw std::invalid_argument("at least one lifetime is required");
  for (const auto& d : lifetimes) {
    if (d.count() <= 0) throw std::invalid_argument("lifetimes must be positive");
  }
  if (cluster_gap_factor <= 0 || visibility_factor <= 0 || push_prevention_factor <= 0) {
    throw std::invalid_argument("builder factors must be positive");
  }
}

Timestamp initial_expiration(int level, Timestamp end, const BuilderConfig& config) {
  const std::int64_t gamma = level <= 3 ? 1 : std::int64_t{1} << (level - 3);
  return end + config.lifetime(level) * gamma;
}

Timestamp initial_expiration(const TreeNode& node, const BuilderConfig& config) {
  return initial_expiration(node.level, node.span.end, config);
}

std::string item_text(const TreeNode& node) {
  const auto span = node.span.start == node.span.end ? format_timestamp(node.span.start)
                                                      : format_span(node.span);
  if (node.placeholder) return span + ": forgotten: " + node.short_summary;
  std::string out = span + ": ";
  bool first = true;
  for (const auto& line : split_lines(node.summary)) {
    if (!first) out += "\n  ";
    out += line;
    first = false;
  }
  return out;
}

std::vector<std::vector<std::size_t>> time_based_cluster(const std::vector<TimeSpan>& spans,
                                                         Duration level_lifetime, double gap_factor,
                                                         const std::vector<int>& owner) {
  std::vector<std::vector<std::size_t>> clusters;
  if (spans.empty()) return clusters;

  std::vector<std::int64_t> positive;
  for (std::size_t i = 1; i < spans.size(); ++i) {
    const auto gap = (spans[i].start - spans[i - 1].end).count();
    if (gap > 0) positive.push_back(gap);
  }
  double median = 0;
  if (!positive.empty()) {
    std::sort(positive.begin(), positive.end());
    const auto n = positive.size();
    median = n % 2 ? static_cast<double>(positive[n / 2])
                   : (static_cast<double>(positive[n / 2 - 1]) + static_cast<double>(positive[n / 2])) / 2.0;
  }
  const double threshold = std::max(gap_factor * median, static_cast<double>(level_lifetime.count()));

  clusters.push_back({0});
  for (std::size_t i = 1; i < spans.size(); ++i) {
    const auto gap = static_cast<double>((spans[i].start - spans[i - 1].end).count());
    const bool same_owner = !owner.empty() && owner[i] >= 0 && owner[i] == owner[i - 1];
    if (gap > threshold && !same_owner) clusters.emplace_back();
    clusters.back().push_back(i);
  }
  if (clusters.size() > 1 &&
      std::all_of(clusters.begin(), clusters.end(), [](const auto& c) { return c.size() == 1; })) {
    std::vector<std::size_t> all(spans.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return {all};
  }
  return clusters;
}

bool starts_new_event(const SceneInstant& previous, const SceneInstant& next) {
  if (next.attribute("speech") != nullptr) return true;
  auto signature = [](const SceneInstant& s) {
    AttributeList out;
    for (const auto& kv : s.attributes) {
      if (kv.first != "speech") out.push_back(kv);
    }
    return out;
  };
  return signature(previous) != signature(next);
}

std::string action_verb(std::string_view line) {
  const auto open = line.find('(');
  return trim(line.substr(0, open));
}

std::string UpdateTrace::log_lines() const {
  std::string out;
  for (const auto& c : calls) {
    nlohmann::ordered_json j;
    j["level"] = c.level;
    j["cluster"] = c.cluster;
    j["kind"] = std::string{to_string(c.kind)};
    j["outcome"] = c.outcome;
    j["fallback"] = c.fallback;
    j["prompt_tokens"] = c.usage.prompt_tokens;
    j["completion_tokens"] = c.usage.completion_tokens;
    out += j.dump() + "\n";
  }
  return out;
}

TreeBuilder::TreeBuilder(LmGateway& gateway, BuilderConfig config)
    : gateway_(gateway), config_(std::move(config)) {
  config_.validate();
}

std::optional<std::string> TreeBuilder::rules_block() const {
  if (!summary_rules_ || summary_rules_->empty()) return std::nullopt;
  return numbered_list(summary_rules_->texts());
}

TreeNode TreeBuilder::make_scene_node(HistoryTree& tree, const SceneInstant& scene) const {
  TreeNode node;
  node.id = tree.allocate_id();
  node.level = kSceneLevel;
  node.kind = NodeKind::scene;
  node.span = TimeSpan::at(scene.at);
  node.summary = describe_scene(scene);
  node.scene = scene;
  node.expiration = initial_expiration(node, config_);
  return node;
}

TreeNode TreeBuilder::make_parent(HistoryTree& tree, std::vector<TreeNode> children, int level,
                                  std::string summary) const {
  TreeNode node;
  node.id = tree.allocate_id();
  node.level = level;
  node.kind = kind_for_level(level);
  node.summary = std::move(summary);
  node.children = std::move(children);
  merge_adjacent_placeholders(node);
  node.span = node.children.front().span;
  for (const auto& c : node.children) node.span = node.span.hull(c.span);
  node.expiration = initial_expiration(node, config_);
  for (const auto& c : node.children) {
    node.expiration = std::max(node.expiration, c.expiration);
    node.never_expires = node.never_expires || c.never_expires;
  }
  return node;
}

std::string TreeBuilder::summarize(const std::vector<TreeNode>& items, int level, UpdateTrace* trace) {
  std::vector<std::string> texts;
  std::vector<std::string> first_lines;
  for (const auto& item : items) {
    texts.push_back(item_text(item));
    if (!item.placeholder) first_lines.push_back(item.first_line());
  }
  LmCallTrace call{level, 0, PromptKind::simple_summarize, "", false, {}};
  std::optional<std::string> summary;
  try {
    const auto response =
        gateway_.complete({PromptKind::simple_summarize, render_summarize_prompt({texts, rules_block()})});
    call.usage = response.usage;
    summary = parse_summary(response.text);
  } catch (const BackendUnreachable& e) {
    logger()->warn("summarize failed: {}", e.what());
  }
  if (!summary || trim(*summary).empty()) {
    call.fallback = true;
    summary = condense_lines(first_lines);
  }
  call.outcome = *summary;
  if (trace) trace->calls.push_back(std::move(call));
  return *summary;
}

namespace {

struct Presented {
  const TreeNode* node;
  int owner;  // parent index, -1 for new items
};

bool valid_directives(const std::vector<GroupingDirective>& directives, int total, int fresh,
                      const std::vector<int>& group_starts) {
  if (directives.empty()) return false;
  std::vector<bool> covered(static_cast<std::size_t>(total), false);
  int max_index = -1;
  for (const auto& d : directives) {
    if (d.low < 0 || d.high < d.low || d.high >= total) return false;
    for (int i = d.low; i <= d.high; ++i) {
      if (covered[static_cast<std::size_t>(i)]) return false;
      covered[static_cast<std::size_t>(i)] = true;
    }
    max_index = std::max(max_index, d.high);
  }
  for (int i = 0; i <= max_index; ++i) {
    if (!covered[static_cast<std::size_t>(i)]) return false;
  }
  if (max_index < fresh - 1) return false;
  // The oldest covered item has to open a group, so existing groups are never split.
  const int oldest_pos = total - 1 - max_index;
  return std::find(group_starts.begin(), group_starts.end(), oldest_pos) != group_starts.end();
}

}  // namespace

std::vector<TreeNode> TreeBuilder::group_and_summarize(HistoryTree& tree,
                                                       const std::vector<TreeNode>& parents,
                                                       std::vector<TreeNode> new_items, int level,
                                                       UpdateTrace* trace, int cluster) {
  if (new_items.empty()) return parents;

  std::vector<Presented> items;
  std::vector<int> group_starts;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    group_starts.push_back(static_cast<int>(items.size()));
    for (const auto& c : parents[p].children) items.push_back({&c, static_cast<int>(p)});
  }
  const int old_count = static_cast<int>(items.size());
  group_starts.push_back(old_count);
  for (const auto& n : new_items) items.push_back({&n, -1});
  const int total = static_cast<int>(items.size());
  const int fresh = static_cast<int>(new_items.size());
  auto index_of = [&](int pos) { return total - 1 - pos; };

  GroupingBindings bindings;
  for (std::size_t p = 0, pos = 0; p < parents.size(); ++p) {
    PresentedGroup g{parents[p].first_line(), {}};
    for (std::size_t c = 0; c < parents[p].children.size(); ++c, ++pos) {
      g.items.push_back({index_of(static_cast<int>(pos)), item_text(*items[pos].node)});
    }
    bindings.previous.push_back(std::move(g));
  }
  for (int pos = old_count; pos < total; ++pos) {
    bindings.current.push_back({index_of(pos), item_text(*items[static_cast<std::size_t>(pos)].node)});
  }
  bindings.rules = rules_block();

  LmCallTrace call{level, cluster, PromptKind::grouping, "", false, {}};
  std::optional<std::vector<GroupingDirective>> directives;
  try {
    const auto response = gateway_.complete({PromptKind::grouping, render_grouping_prompt(bindings)});
    call.usage = response.usage;
    directives = parse_grouping(response.text);
  } catch (const BackendUnreachable& e) {
    logger()->warn("grouping failed: {}", e.what());
  }
  if (directives && !valid_directives(*directives, total, fresh, group_starts)) {
    logger()->debug("grouping directives rejected at level {}", level);
    directives.reset();
  }
  if (!directives) {
    call.fallback = true;
    std::vector<std::string> lines;
    for (const auto& n : new_items) {
      if (!n.placeholder) lines.push_back(n.first_line());
    }
    directives = std::vector<GroupingDirective>{{fresh - 1, 0, condense_lines(lines)}};
  }

  nlohmann::ordered_json applied = nlohmann::ordered_json::object();
  for (const auto& d : *directives) {
    applied[d.high == d.low ? std::to_string(d.low)
                            : std::to_string(d.high) + "-" + std::to_string(d.low)] = d.summary;
  }
  call.outcome = applied.dump();
  if (trace) trace->calls.push_back(std::move(call));

  int max_index = 0;
  for (const auto& d : *directives) max_index = std::max(max_index, d.high);
  const int first_pos = index_of(max_index);

  std::vector<TreeNode> out;
  std::vector<const TreeNode*> replaced;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    if (group_starts[p] < first_pos) {
      out.push_back(parents[p]);
    } else {
      replaced.push_back(&parents[p]);
    }
  }

  auto sorted = *directives;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.high > b.high; });
  for (const auto& d : sorted) {
    std::vector<NodeId> ids;
    for (int i = d.high; i >= d.low; --i) ids.push_back(items[static_cast<std::size_t>(index_of(i))].node->id);
    auto summary = trim(d.summary);
    const TreeNode* same = nullptr;
    for (const auto* old : replaced) {
      if (old->summary != summary || old->children.size() != ids.size()) continue;
      if (std::equal(ids.begin(), ids.end(), old->children.begin(),
                     [](NodeId id, const TreeNode& c) { return id == c.id; })) {
        same = old;
      }
    }
    if (same) {
      out.push_back(*same);
      continue;
    }
    std::vector<TreeNode> children;
    for (int i = d.high; i >= d.low; --i) children.push_back(*items[static_cast<std::size_t>(index_of(i))].node);
    out.push_back(make_parent(tree, std::move(children), level + 1, std::move(summary)));
  }
  return out;
}

bool TreeBuilder::is_interaction(const TreeNode& event) const {
  return config_.interaction_actions.count(action_verb(event.first_line())) > 0;
}

std::vector<TreeNode> TreeBuilder::domain_group(HistoryTree& tree, const std::vector<TreeNode>& parents,
                                                std::vector<TreeNode> new_items, int level) const {
  struct Group {
    std::vector<TreeNode> children;
    const TreeNode* original;  // unmodified existing parent, if any
  };
  std::vector<Group> groups;
  for (const auto& p : parents) groups.push_back({p.children, &p});

  auto last_live = [](const std::vector<TreeNode>& children) -> const TreeNode* {
    for (auto it = children.rbegin(); it != children.rend(); ++it) {
      if (!it->placeholder) return &*it;
    }
    return nullptr;
  };

  for (auto& item : new_items) {
    bool append = false;
    if (!groups.empty() && !item.placeholder) {
      const auto* prev = last_live(groups.back().children);
      if (prev != nullptr) {
        if (level == kSceneLevel) {
          append = prev->scene && item.scene && !starts_new_event(*prev->scene, *item.scene);
        } else {
          append = !is_interaction(*prev);
        }
      }
    }
    if (append) {
      groups.back().children.push_back(std::move(item));
      groups.back().original = nullptr;
    } else {
      groups.push_back({{std::move(item)}, nullptr});
    }
  }

  std::vector<TreeNode> out;
  for (auto& g : groups) {
    if (g.original) {
      out.push_back(*g.original);
      continue;
    }
    std::string summary;
    if (level == kSceneLevel) {
      for (const auto& c : g.children) {
        if (!c.placeholder && c.scene) {
          summary = describe_scene(*c.scene);
          break;
        }
      }
    } else {
      std::vector<std::string> lines;
      for (const auto& c : g.children) {
        if (!c.placeholder) lines.push_back(c.first_line());
      }
      summary = condense_lines(lines);
    }
    if (summary.empty()) summary = g.children.front().first_line();
    out.push_back(make_parent(tree, std::move(g.children), level + 1, std::move(summary)));
  }
  return out;
}

std::vector<TreeNode> TreeBuilder::time_aware_group_and_summarize(HistoryTree& tree,
                                                                  const std::vector<TreeNode>& parents,
                                                                  std::vector<TreeNode> new_items,
                                                                  int level, UpdateTrace* trace,
                                                                  int cluster_base) {
  if (new_items.empty()) return parents;

  std::vector<TimeSpan> spans;
  std::vector<int> owner;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    for (const auto& c : parents[p].children) {
      spans.push_back(c.span);
      owner.push_back(static_cast<int>(p));
    }
  }
  const auto old_count = spans.size();
  for (const auto& n : new_items) {
    spans.push_back(n.span);
    owner.push_back(-1);
  }
  const auto clusters =
      time_based_cluster(spans, config_.lifetime(level), config_.cluster_gap_factor, owner);

  const bool domain = config_.domain_levels && level <= kEventLevel;
  std::vector<TreeNode> out;
  int cluster_no = cluster_base;
  for (const auto& cluster : clusters) {
    std::vector<TreeNode> cluster_parents;
    std::vector<TreeNode> cluster_new;
    int last_owner = -1;
    for (const auto i : cluster) {
      if (i >= old_count) {
        cluster_new.push_back(std::move(new_items[i - old_count]));
      } else if (owner[i] != last_owner) {
        last_owner = owner[i];
        cluster_parents.push_back(parents[static_cast<std::size_t>(owner[i])]);
      }
    }
    if (cluster_new.empty()) {
      for (auto& p : cluster_parents) out.push_back(std::move(p));
    } else {
      auto grouped = domain ? domain_group(tree, cluster_parents, std::move(cluster_new), level)
                            : group_and_summarize(tree, cluster_parents, std::move(cluster_new), level,
                                                  trace, cluster_no);
      for (auto& g : grouped) out.push_back(std::move(g));
    }
    ++cluster_no;
  }
  return out;
}

namespace {

// Rightmost node at `level` following last children from the root; nullptr when the path
// ends early or reaches a placeholder.
TreeNode* rightmost_at(HistoryTree& tree, int level) {
  TreeNode* node = &tree.root;
  while (node->level > level) {
    if (node->children.empty()) return nullptr;
    node = &node->children.back();
    if (node->placeholder) return nullptr;
  }
  return node;
}

Timestamp latest_end(const HistoryTree& tree) {
  Timestamp end{std::numeric_limits<std::int64_t>::min()};
  for (const auto& c : tree.root.children) end = std::max(end, c.span.end);
  return end;
}

std::int64_t percentile95(std::vector<std::int64_t> values) {
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

double median_of(std::vector<std::int64_t> values) {
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? static_cast<double>(values[n / 2])
               : (static_cast<double>(values[n / 2 - 1]) + static_cast<double>(values[n / 2])) / 2.0;
}

}  // namespace

bool TreeBuilder::try_prevent_push(HistoryTree& tree, int level, std::vector<TreeNode>& pending,
                                   UpdateTrace& trace) {
  TreeNode* anchor = rightmost_at(tree, level + 2);
  if (anchor == nullptr || anchor->children.empty()) return false;
  TreeNode& latest = anchor->children.back();
  if (latest.placeholder) return false;

  std::vector<std::int64_t> gaps;
  std::vector<std::int64_t> parent_spans;
  for (const auto& p : anchor->children) {
    if (p.placeholder) continue;
    parent_spans.push_back(p.span.length().count());
    for (std::size_t i = 1; i < p.children.size(); ++i) {
      gaps.push_back((p.children[i].span.start - p.children[i - 1].span.end).count());
    }
  }
  if (gaps.size() < 2) return false;

  Timestamp earliest = pending.front().span.start;
  TimeSpan hull = latest.span;
  for (const auto& n : pending) {
    earliest = std::min(earliest, n.span.start);
    hull = hull.hull(n.span);
  }
  const auto gap = static_cast<double>((earliest - latest.children.back().span.end).count());
  if (!(gap < median_of(gaps))) return false;
  if (static_cast<double>(hull.length().count()) >
      config_.push_prevention_factor * static_cast<double>(percentile95(parent_spans))) {
    return false;
  }

  for (auto& n : pending) latest.children.push_back(std::move(n));
  pending.clear();
  merge_adjacent_placeholders(latest);
  latest.summary = summarize(latest.children, level + 1, &trace);

  // Refresh spans and expirations from the modified parent up to the root.
  for (int l = level + 1; l <= tree.max_depth; ++l) {
    TreeNode* node = rightmost_at(tree, l);
    node->span = node->children.front().span;
    for (const auto& c : node->children) {
      node->span = node->span.hull(c.span);
      node->expiration = std::max(node->expiration, c.expiration);
      node->never_expires = node->never_expires || c.never_expires;
    }
  }
  return true;
}

UpdateTrace TreeBuilder::update_tree(HistoryTree& tree, const std::vector<SceneInstant>& batch) {
  UpdateTrace trace;
  trace.version_before = tree.version;
  trace.version_after = tree.version;
  if (batch.empty()) return trace;
  if (tree.max_depth != config_.max_depth) {
    throw std::invalid_argument("tree depth does not match the builder configuration");
  }
  for (std::size_t i = 1; i < batch.size(); ++i) {
    if (batch[i].at < batch[i - 1].at) throw std::invalid_argument("batch is not time-ordered");
  }
  if (!tree.empty() && batch.front().at < latest_end(tree)) {
    throw std::invalid_argument("batch starts before the end of the tree");
  }

  const int top = tree.max_depth - 1;
  std::vector<TreeNode> pending;
  pending.reserve(batch.size());
  for (const auto& scene : batch) pending.push_back(make_scene_node(tree, scene));

  bool top_changed = false;
  bool lost_child = false;
  int cluster_base = 0;
  for (int level = 0; level < top && !pending.empty(); ++level) {
    LevelTrace lt;
    lt.level = level;
    const bool domain = config_.domain_levels && level <= kEventLevel;

    if (!lost_child && !domain && try_prevent_push(tree, level, pending, trace)) {
      lt.prevent_push = true;
      lt.changed = true;
      lt.anchor = rightmost_at(tree, level + 2)->id;
      trace.levels.push_back(lt);
      top_changed = level + 1 == top;
      break;
    }

    TreeNode* anchor = rightmost_at(tree, level + 2);
    if (anchor) lt.anchor = anchor->id;
    const std::vector<TreeNode> p_old = anchor ? anchor->children : std::vector<TreeNode>{};

    Timestamp earliest = pending.front().span.start;
    for (const auto& n : pending) earliest = std::min(earliest, n.span.start);
    const auto window = static_cast<std::int64_t>(
        std::llround(config_.visibility_factor * static_cast<double>(config_.lifetime(level + 1).count())));
    lt.cutoff = earliest - Duration{window};

    std::size_t visible_begin = 0;
    for (std::size_t i = 0; i < p_old.size(); ++i) {
      if (p_old[i].placeholder) visible_begin = i + 1;
    }
    while (visible_begin < p_old.size() && p_old[visible_begin].span.end < lt.cutoff) ++visible_begin;

    const std::vector<TreeNode> visible(p_old.begin() + static_cast<std::ptrdiff_t>(visible_begin), p_old.end());
    auto merged = time_aware_group_and_summarize(tree, visible, std::move(pending), level, &trace, cluster_base);
    cluster_base += 1000;
    pending.clear();

    std::vector<TreeNode> p_new(p_old.begin(), p_old.begin() + static_cast<std::ptrdiff_t>(visible_begin));
    for (auto& m : merged) p_new.push_back(std::move(m));

    std::size_t first = 0;
    while (first < p_old.size() && first < p_new.size() && p_old[first].id == p_new[first].id) ++first;
    lt.first_change = first;
    lt.changed = first < p_new.size() || p_new.size() != p_old.size();
    if (!lt.changed) {
      trace.levels.push_back(lt);
      break;
    }

    if (level + 1 == top) {
      tree.root.children = std::move(p_new);
      top_changed = true;
      trace.levels.push_back(lt);
      break;
    }
    if (first < p_old.size() || lost_child) {
      TreeNode* holder = rightmost_at(tree, level + 3);
      if (holder == nullptr || holder->children.empty() || holder->children.back().id != anchor->id) {
        throw std::logic_error("anchor is not the last child of its parent");
      }
      holder->children.pop_back();
      lt.dissolved_anchor = true;
      lost_child = true;
      pending = std::move(p_new);
    } else {
      lost_child = false;
      pending.assign(std::make_move_iterator(p_new.begin() + static_cast<std::ptrdiff_t>(first)),
                     std::make_move_iterator(p_new.end()));
    }
    trace.levels.push_back(lt);
  }

  if (!tree.root.children.empty()) {
    tree.root.span = tree.root.children.front().span;
    for (const auto& c : tree.root.children) tree.root.span = tree.root.span.hull(c.span);
  }
  if (top_changed && config_.root_summary && !tree.root.children.empty()) {
    tree.root.summary = summarize(tree.root.children, tree.max_depth, &trace);
  }
  ++tree.version;
  trace.version_after = tree.version;
  return trace;
}

HistoryTree build_tree(TreeBuilder& builder, const std::vector<SceneInstant>& scenes) {
  HistoryTree tree(builder.config().max_depth);
  builder.update_tree(tree, scenes);
  return tree;
}

}  // namespace emtree
