#pragma once

#include <algorithm>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "emtree/builder.hpp"
#include "emtree/events.hpp"
#include "emtree/lm.hpp"
#include "emtree/memory_tree.hpp"
#include "emtree/scripted.hpp"

namespace emtree::test {

inline Timestamp at(int hour, int minute = 0, int second = 0, unsigned day = 24) {
  return make_timestamp(2024, 4, day, hour, minute, second);
}

inline TreeNode node(NodeId id, int level, TimeSpan span, std::string summary, std::vector<TreeNode> children = {}) {
  TreeNode n;
  n.id = id;
  n.level = level;
  n.kind = kind_for_level(level);
  n.span = span;
  n.summary = std::move(summary);
  n.children = std::move(children);
  n.expiration = span.end + std::chrono::hours(1);
  return n;
}

inline TreeNode tombstone(NodeId id, int level, TimeSpan span, std::string short_summary) {
  TreeNode n;
  n.id = id;
  n.level = level;
  n.kind = kind_for_level(level);
  n.span = span;
  n.placeholder = true;
  n.short_summary = std::move(short_summary);
  n.expiration = span.end;
  return n;
}

inline SceneInstant scene(Timestamp t, std::string action, std::string location = "Kitchen") {
  SceneInstant s;
  s.at = t;
  s.attributes = {{"action", std::move(action)}, {"location", std::move(location)}};
  return s;
}

inline std::shared_ptr<LmGateway> scripted_gateway(ScriptedConfig config = {}) {
  return std::make_shared<LmGateway>(std::make_shared<ScriptedBackend>(std::move(config)));
}

// Scripted backend that can be paused: calls block while the gate is closed.
class GatedBackend : public LmBackend {
 public:
  explicit GatedBackend(ScriptedConfig config = {}) : inner_(std::move(config)) {}

  LmResponse complete(const LmRequest& request) override {
    std::unique_lock lock(mutex_);
    ++waiting_;
    changed_.notify_all();
    changed_.wait(lock, [&] { return open_; });
    --waiting_;
    ++calls_;
    lock.unlock();
    return inner_.complete(request);
  }
  std::string name() const override { return "gated"; }

  void close() {
    std::lock_guard lock(mutex_);
    open_ = false;
  }
  void open() {
    std::lock_guard lock(mutex_);
    open_ = true;
    changed_.notify_all();
  }
  // Blocks until some call is parked at the closed gate.
  void wait_for_waiter() {
    std::unique_lock lock(mutex_);
    changed_.wait(lock, [&] { return waiting_ > 0; });
  }
  int calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
  }

 private:
  ScriptedBackend inner_;
  mutable std::mutex mutex_;
  std::condition_variable changed_;
  bool open_ = true;
  int waiting_ = 0;
  int calls_ = 0;
};

inline EventRecord scene_event(Timestamp t, std::string action, std::string location = "Kitchen") {
  EventRecord r;
  r.at = t;
  r.kind = EventKind::scene;
  r.attributes = {{"action", std::move(action)}, {"location", std::move(location)}};
  return r;
}

// Random well-formed tree: levels descend by one, child spans partition the parent span in
// time order, expirations and placeholders drawn at random. At most `max_nodes` nodes.
struct RandomTreeOptions {
  int depth = 5;
  int max_nodes = 200;
  int max_children = 4;
  double placeholder_probability = 0.1;
  double never_expires_probability = 0.05;
  Timestamp start = at(8);
  Duration length = std::chrono::hours(48);
  Duration expiration_spread = std::chrono::hours(72);
};

inline HistoryTree random_tree(std::mt19937_64& rng, const RandomTreeOptions& o = {}) {
  HistoryTree tree(o.depth);
  int budget = o.max_nodes;
  std::uniform_real_distribution<double> unit(0, 1);
  auto rand_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::function<void(TreeNode&)> grow = [&](TreeNode& parent) {
    if (parent.level == 0 || budget <= 0) return;
    const int n = std::min(budget, rand_int(1, o.max_children));
    budget -= n;
    const auto len = parent.span.length().count();
    std::vector<std::int64_t> cuts{0, len};
    for (int i = 1; i < n; ++i) cuts.push_back(std::uniform_int_distribution<std::int64_t>(0, len)(rng));
    std::sort(cuts.begin(), cuts.end());
    for (int i = 0; i < n; ++i) {
      TreeNode c;
      c.id = tree.allocate_id();
      c.level = parent.level - 1;
      c.kind = kind_for_level(c.level);
      c.span = {parent.span.start + Duration{cuts[static_cast<std::size_t>(i)]},
                parent.span.start + Duration{cuts[static_cast<std::size_t>(i) + 1]}};
      c.summary = "Item " + std::to_string(c.id) + "\ndetail " + std::to_string(rand_int(0, 99));
      c.expiration = o.start + Duration{std::uniform_int_distribution<std::int64_t>(0, o.expiration_spread.count())(rng)};
      c.never_expires = unit(rng) < o.never_expires_probability;
      parent.children.push_back(std::move(c));
    }
    for (auto& c : parent.children) {
      if (unit(rng) < o.placeholder_probability) {
        c.placeholder = true;
        c.short_summary = "gone " + std::to_string(c.id);
        c.summary.clear();
        c.never_expires = false;
      } else {
        grow(c);
      }
    }
  };
  tree.root.span = {o.start, o.start + o.length};
  grow(tree.root);
  // Leaves above level 0 would be summaries without children; keep them as placeholders.
  std::function<void(TreeNode&)> fix = [&](TreeNode& n) {
    for (auto& c : n.children) {
      if (!c.placeholder && c.level > 0 && c.children.empty()) {
        c.placeholder = true;
        c.short_summary = "gone " + std::to_string(c.id);
        c.summary.clear();
        c.never_expires = false;
      }
      if (!c.placeholder && c.level == 0) c.scene = SceneInstant{c.span.start, {{"action", "Item"}}, {}};
      fix(c);
    }
    // Two tombstones side by side would be merged by any sweep; coalesce them here.
    for (std::size_t i = 1; i < n.children.size();) {
      if (n.children[i].placeholder && n.children[i - 1].placeholder) {
        n.children[i - 1].span.end = n.children[i].span.end;
        n.children.erase(n.children.begin() + static_cast<std::ptrdiff_t>(i));
      } else {
        ++i;
      }
    }
  };
  fix(tree.root);
  return tree;
}

// Pure time decay written from the rules directly: expired nodes turn into tombstones,
// survivors take the latest expiration below them, then tombstone runs are joined.
inline void pure_decay(TreeNode& n, Timestamp now) {
  for (auto& c : n.children) {
    if (c.placeholder) continue;
    if (!c.never_expires && c.expiration < now) {
      TreeNode p;
      p.id = c.id;
      p.level = c.level;
      p.kind = c.kind;
      p.span = c.span;
      p.placeholder = true;
      p.expiration = c.expiration;
      const auto nl = c.summary.find('\n');
      p.short_summary = c.summary.substr(0, nl);
      c = p;
      continue;
    }
    pure_decay(c, now);
    for (const auto& g : c.children) {
      c.expiration = std::max(c.expiration, g.expiration);
      c.never_expires = c.never_expires || g.never_expires;
    }
  }
  std::vector<TreeNode> merged;
  for (auto& c : n.children) {
    if (c.placeholder && !merged.empty() && merged.back().placeholder) {
      merged.back().span.end = c.span.end;
      merged.back().short_summary += "; " + c.short_summary;
      merged.back().expiration = std::max(merged.back().expiration, c.expiration);
    } else {
      merged.push_back(std::move(c));
    }
  }
  n.children = std::move(merged);
}

}  // namespace emtree::test
