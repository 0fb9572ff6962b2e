#include <gtest/gtest.h>

#include <map>

#include "emtree/builder.hpp"
#include "fixtures.hpp"

using namespace emtree;
using namespace emtree::test;
using std::chrono::days;
using std::chrono::hours;
using std::chrono::minutes;
using std::chrono::seconds;

TEST(Expiration, LevelScaling) {
  const BuilderConfig cfg;
  EXPECT_EQ(initial_expiration(0, at(10), cfg), at(10, 15));
  EXPECT_EQ(initial_expiration(1, at(10), cfg), at(11));
  EXPECT_EQ(initial_expiration(2, at(10), cfg), at(10) + days(1));
  EXPECT_EQ(initial_expiration(3, at(10), cfg), at(10) + days(1));
  EXPECT_EQ(initial_expiration(4, at(10), cfg), at(10) + days(2));
  EXPECT_EQ(initial_expiration(5, at(10), cfg), at(10) + days(4));
  EXPECT_EQ(initial_expiration(7, at(10), cfg), at(10) + days(16));
}

TEST(Config, Validation) {
  BuilderConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.max_depth = 2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.lifetimes = {minutes(0)};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

namespace {

std::vector<TimeSpan> points(const std::vector<Duration>& gaps, Timestamp start = at(9)) {
  std::vector<TimeSpan> out{{start, start}};
  for (const auto g : gaps) {
    const auto t = out.back().end + g;
    out.push_back({t, t});
  }
  return out;
}

// Independent threshold scan: sort the positive gaps by hand and take the middle.
std::vector<std::vector<std::size_t>> brute_force_clusters(const std::vector<TimeSpan>& spans, Duration lifetime,
                                                           double g) {
  if (spans.empty()) return {};
  std::vector<double> gaps;
  for (std::size_t i = 1; i < spans.size(); ++i) gaps.push_back(static_cast<double>((spans[i].start - spans[i - 1].end).count()));
  std::vector<double> positive;
  for (const auto x : gaps) {
    if (x > 0) positive.push_back(x);
  }
  for (std::size_t i = 0; i < positive.size(); ++i) {
    for (std::size_t j = i + 1; j < positive.size(); ++j) {
      if (positive[j] < positive[i]) std::swap(positive[i], positive[j]);
    }
  }
  double median = 0;
  if (!positive.empty()) {
    const auto n = positive.size();
    median = n % 2 == 1 ? positive[n / 2] : 0.5 * (positive[n / 2 - 1] + positive[n / 2]);
  }
  const double threshold = std::max(g * median, static_cast<double>(lifetime.count()));
  std::vector<std::vector<std::size_t>> out{{0}};
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (gaps[i - 1] > threshold) out.emplace_back();
    out.back().push_back(i);
  }
  bool all_single = out.size() > 1;
  for (const auto& c : out) all_single = all_single && c.size() == 1;
  if (all_single) {
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i < spans.size(); ++i) all.push_back(i);
    return {all};
  }
  return out;
}

}  // namespace

TEST(Clustering, SplitsAtLongGap) {
  const auto c = time_based_cluster(points({minutes(1), minutes(1), hours(8)}), minutes(15), 10.0);
  EXPECT_EQ(c, (std::vector<std::vector<std::size_t>>{{0, 1, 2}, {3}}));
}

TEST(Clustering, TrivialCases) {
  EXPECT_TRUE(time_based_cluster({}, minutes(15), 10.0).empty());
  EXPECT_EQ(time_based_cluster(points({}), minutes(15), 10.0), (std::vector<std::vector<std::size_t>>{{0}}));
  EXPECT_EQ(time_based_cluster(points({hours(5), hours(5), hours(5)}), minutes(15), 10.0).size(), 1u);
}

TEST(Clustering, AllSingletonsCollapse) {
  // Gaps all above the lifetime floor and G × median when G is small.
  const auto c = time_based_cluster(points({hours(2), hours(3), hours(4)}), minutes(15), 0.5);
  EXPECT_EQ(c, (std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}}));
}

TEST(Clustering, NeverSplitsAnOwner) {
  const auto c = time_based_cluster(points({minutes(1), hours(8), minutes(1)}), minutes(15), 10.0, {0, 0, 0, -1});
  EXPECT_EQ(c, (std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}}));
}

TEST(Clustering, MatchesBruteForceScan) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = std::uniform_int_distribution<int>(0, 15)(rng);
    std::vector<Duration> gaps;
    for (int i = 0; i < n; ++i) {
      const int kind = static_cast<int>(rng() % 4);
      const std::int64_t secs = kind == 0 ? 0 : kind == 1 ? static_cast<std::int64_t>(rng() % 120)
                                      : kind == 2 ? static_cast<std::int64_t>(rng() % 3600)
                                                  : static_cast<std::int64_t>(rng() % 200000);
      gaps.push_back(seconds(secs));
    }
    const auto spans = n == 0 && rng() % 2 ? std::vector<TimeSpan>{} : points(gaps);
    const double g = std::uniform_real_distribution<double>(0.5, 20)(rng);
    const Duration life = minutes(static_cast<int>(rng() % 120) + 1);
    EXPECT_EQ(time_based_cluster(spans, life, g), brute_force_clusters(spans, life, g));
  }
}

namespace {

struct GroupingFixture {
  std::shared_ptr<LmGateway> gateway;
  HistoryTree tree{8};
  std::unique_ptr<TreeBuilder> builder;
  std::vector<TreeNode> parents;
  TreeNode fresh;

  explicit GroupingFixture(const std::string& reply) {
    ScriptedConfig sc;
    sc.rules.push_back({PromptKind::grouping, ".*", reply});
    gateway = scripted_gateway(sc);
    BuilderConfig cfg;
    cfg.domain_levels = false;
    builder = std::make_unique<TreeBuilder>(*gateway, cfg);
    auto s = [&](int minute, const std::string& a) { return builder->make_scene_node(tree, scene(at(9, minute), a)); };
    parents.push_back(builder->make_parent(tree, {s(0, "GoTo(Fridge_1)")}, 1, "Went to the fridge"));
    parents.push_back(builder->make_parent(tree, {s(1, "Open(Fridge_1)")}, 1, "Opened the fridge"));
    parents.push_back(builder->make_parent(
        tree, {s(2, "Pickup(Potato_4)"), s(3, "GoTo(Microwave_1)"), s(4, "Open(Microwave_1)"), s(5, "Put(Potato_4)")}, 1,
        "Put a potato in the microwave"));
    fresh = s(6, "ToggleOn(Microwave_1)");
  }

  std::vector<TreeNode> run(UpdateTrace* trace = nullptr) {
    return builder->group_and_summarize(tree, parents, {fresh}, 0, trace);
  }
};

}  // namespace

TEST(GroupAndSummarize, MergesNewestIntoLastGroup) {
  GroupingFixture f("Reasoning: the newest item continues the cooking.\nJSON: {\"4-0\": \"I cooked Potato_4 in the microwave\"}");
  const auto out = f.run();
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], f.parents[0]);
  EXPECT_EQ(out[1], f.parents[1]);
  EXPECT_EQ(out[2].summary, "I cooked Potato_4 in the microwave");
  EXPECT_EQ(out[2].level, 1);
  ASSERT_EQ(out[2].children.size(), 5u);
  EXPECT_EQ(out[2].children.back().id, f.fresh.id);
  EXPECT_EQ(out[2].span, (TimeSpan{at(9, 2), at(9, 6)}));
}

TEST(GroupAndSummarize, SingletonDirectiveAppends) {
  GroupingFixture f("JSON: {\"0\": \"x\"}");
  const auto out = f.run();
  ASSERT_EQ(out.size(), 4u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(out[static_cast<std::size_t>(i)], f.parents[static_cast<std::size_t>(i)]);
  EXPECT_EQ(out[3].summary, "x");
  ASSERT_EQ(out[3].children.size(), 1u);
}

TEST(GroupAndSummarize, RejectsBadDirectives) {
  for (const std::string reply : {"JSON: {\"2-0\": \"a\", \"1\": \"b\"}", "JSON: {\"3-0\": \"splits a group\"}",
                                  "JSON: {\"9-0\": \"out of range\"}", "no answer"}) {
    GroupingFixture f(reply);
    UpdateTrace trace;
    const auto out = f.run(&trace);
    ASSERT_EQ(out.size(), 4u) << reply;
    EXPECT_EQ(out[2], f.parents[2]);
    EXPECT_EQ(out[3].children.size(), 1u);
    EXPECT_EQ(out[3].summary, "ToggleOn(Microwave_1)");
    ASSERT_EQ(trace.calls.size(), 1u);
    EXPECT_TRUE(trace.calls[0].fallback);
  }
}

TEST(TimeAwareGrouping, DistantClusterUntouched) {
  ScriptedConfig sc;
  sc.grouping = GroupingPolicy::merge_all;
  auto gw = scripted_gateway(sc);
  BuilderConfig cfg;
  cfg.domain_levels = false;
  TreeBuilder b(*gw, cfg);
  HistoryTree tree(8);
  auto s = [&](Timestamp t, const std::string& a) { return b.make_scene_node(tree, scene(t, a)); };
  std::vector<TreeNode> parents{b.make_parent(tree, {s(at(9), "GoTo(Sink_1)"), s(at(9, 1), "Pickup(Knife_1)")}, 1, "a"),
                                b.make_parent(tree, {s(at(9, 2), "Place(Knife_1)")}, 1, "b")};
  const auto before0 = structural_hash(parents[0]);
  const auto before1 = structural_hash(parents[1]);
  const auto out = b.time_aware_group_and_summarize(tree, parents, {s(at(9, 0, 0, 27), "LookAround")}, 0);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(structural_hash(out[0]), before0);
  EXPECT_EQ(structural_hash(out[1]), before1);
  EXPECT_EQ(out[2].children.size(), 1u);
}

TEST(TimeAwareGrouping, MergeAllGivesSingleParent) {
  ScriptedConfig sc;
  sc.grouping = GroupingPolicy::merge_all;
  auto gw = scripted_gateway(sc);
  BuilderConfig cfg;
  cfg.domain_levels = false;
  TreeBuilder b(*gw, cfg);
  HistoryTree tree(8);
  auto s = [&](int m, const std::string& a) { return b.make_scene_node(tree, scene(at(9, m), a)); };
  std::vector<TreeNode> parents{b.make_parent(tree, {s(0, "GoTo(Sink_1)")}, 1, "a"),
                                b.make_parent(tree, {s(1, "Pickup(Knife_1)")}, 1, "b")};
  const auto out = b.time_aware_group_and_summarize(tree, parents, {s(2, "Place(Knife_1)")}, 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].children.size(), 3u);
}

TEST(TimeAwareGrouping, NoNewItemsIsIdentity) {
  auto gw = scripted_gateway();
  TreeBuilder b(*gw, {});
  HistoryTree tree(8);
  std::vector<TreeNode> parents{b.make_parent(tree, {b.make_scene_node(tree, scene(at(9), "GoTo(Sink_1)"))}, 1, "a")};
  EXPECT_EQ(b.time_aware_group_and_summarize(tree, parents, {}, 0), parents);
  EXPECT_EQ(gw->ledger().total(), TokenUsage{});
}

TEST(UpdateTree, FirstSceneBuildsChain) {
  auto gw = scripted_gateway();
  TreeBuilder b(*gw, {});
  HistoryTree tree(8);
  b.update_tree(tree, {scene(at(9), "GoTo(Sink_1)")});
  EXPECT_EQ(tree.version, 1u);
  EXPECT_TRUE(check_invariants(tree).empty());
  ASSERT_EQ(tree.root.children.size(), 1u);
  const TreeNode* n = &tree.root;
  int depth = 0;
  while (!n->children.empty()) {
    ASSERT_EQ(n->children.size(), 1u);
    n = &n->children.front();
    ++depth;
  }
  EXPECT_EQ(n->level, 0);
  EXPECT_EQ(depth, tree.max_depth);
}

TEST(UpdateTree, EmptyBatchIsNoOp) {
  auto gw = scripted_gateway();
  TreeBuilder b(*gw, {});
  HistoryTree tree(8);
  b.update_tree(tree, {scene(at(9), "GoTo(Sink_1)")});
  const auto h = structural_hash(tree);
  b.update_tree(tree, {});
  EXPECT_EQ(tree.version, 1u);
  EXPECT_EQ(structural_hash(tree), h);
}

TEST(UpdateTree, RejectsOlderBatch) {
  auto gw = scripted_gateway();
  TreeBuilder b(*gw, {});
  HistoryTree tree(8);
  b.update_tree(tree, {scene(at(9), "GoTo(Sink_1)")});
  EXPECT_THROW(b.update_tree(tree, {scene(at(8), "GoTo(Sink_1)")}), std::invalid_argument);
  EXPECT_EQ(tree.version, 1u);
}

namespace {

std::map<int, std::vector<const TreeNode*>> by_level(const HistoryTree& tree) {
  std::map<int, std::vector<const TreeNode*>> out;
  visit(tree.root, [&](const TreeNode& n, const TreeNode* parent) {
    if (parent) out[n.level].push_back(&n);
  });
  return out;
}

}  // namespace

TEST(DomainLevels, EventAndGoalBoundaries) {
  auto gw = scripted_gateway();
  TreeBuilder b(*gw, {});
  const std::vector<SceneInstant> scenes{
      scene(at(9, 0, 0), "GoTo(Sink_1)"),          scene(at(9, 0, 15), "GoTo(Sink_1)"),
      scene(at(9, 1), "Pickup(Knife_1)"),          scene(at(9, 2), "GoTo(CounterTop_1)"),
      scene(at(9, 3), "Place(Knife_1, CounterTop_1)"), scene(at(9, 4), "LookAround")};
  const auto tree = build_tree(b, scenes);
  const auto levels = by_level(tree);
  ASSERT_EQ(levels.at(1).size(), 5u);
  ASSERT_EQ(levels.at(2).size(), 3u);
  EXPECT_EQ(levels.at(1)[0]->children.size(), 2u);
  std::vector<std::size_t> goal_sizes;
  for (const auto* g : levels.at(2)) goal_sizes.push_back(g->children.size());
  EXPECT_EQ(goal_sizes, (std::vector<std::size_t>{2, 2, 1}));
  EXPECT_TRUE(check_invariants(tree).empty());
}

TEST(DomainLevels, SpeechAlwaysStartsEvent) {
  auto a = scene(at(9), "LookAround");
  auto b = a;
  EXPECT_FALSE(starts_new_event(a, b));
  b.attributes.push_back({"speech", "hello"});
  EXPECT_TRUE(starts_new_event(a, b));
  auto c = scene(at(9), "Place(Knife_1, Sink_1)");
  EXPECT_TRUE(starts_new_event(a, c));
  EXPECT_EQ(action_verb("Pickup(Knife_0)"), "Pickup");
}

namespace {

std::vector<SceneInstant> household_stream(std::mt19937_64& rng, int count, Timestamp start, bool dense = false) {
  const std::vector<std::string> actions{"GoTo(Sink_1)", "Pickup(Knife_1)", "Place(Knife_1, Sink_1)", "LookAround",
                                         "Open(Fridge_1)", "GoTo(Fridge_1)"};
  std::vector<SceneInstant> out;
  auto t = start;
  for (int i = 0; i < count; ++i) {
    const int kind = dense ? 0 : static_cast<int>(rng() % 10);
    t += kind < 7 ? seconds(10 + static_cast<int>(rng() % 80)) : kind < 9 ? minutes(20 + static_cast<int>(rng() % 60)) : hours(10);
    out.push_back(scene(t, actions[rng() % actions.size()], rng() % 3 ? "Kitchen" : "Hall"));
  }
  return out;
}

}  // namespace

// Holds for streams that stay inside the visibility window, with the prevent-push shortcut off:
// both only act when earlier parents already exist, which a single batch never sees.
TEST(UpdateTree, BatchMatchesSequentialUnderAppendRule) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto scenes = household_stream(rng, 40, at(8), true);
    for (const bool domain : {true, false}) {
      ScriptedConfig sc;
      sc.grouping = GroupingPolicy::append_to_latest;
      BuilderConfig cfg;
      cfg.domain_levels = domain;
      cfg.push_prevention_factor = 1e-9;
      auto g1 = scripted_gateway(sc);
      auto g2 = scripted_gateway(sc);
      TreeBuilder batch_builder(*g1, cfg);
      TreeBuilder seq_builder(*g2, cfg);
      HistoryTree batch(cfg.max_depth), seq(cfg.max_depth);
      batch_builder.update_tree(batch, scenes);
      for (const auto& s : scenes) seq_builder.update_tree(seq, {s});
      EXPECT_EQ(batch.version, 1u);
      EXPECT_EQ(seq.version, scenes.size());
      EXPECT_EQ(shape_hash(batch.root), shape_hash(seq.root)) << "trial " << trial << " domain " << domain;
    }
  }
}

TEST(UpdateTree, RandomStreamsKeepInvariants) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 15; ++trial) {
    ScriptedConfig sc;
    sc.grouping = static_cast<GroupingPolicy>(rng() % 3);
    auto gw = scripted_gateway(sc);
    BuilderConfig cfg;
    cfg.domain_levels = rng() % 2 == 0;
    cfg.max_depth = 4 + static_cast<int>(rng() % 5);
    TreeBuilder b(*gw, cfg);
    HistoryTree tree(cfg.max_depth);
    const auto scenes = household_stream(rng, 80, at(8));
    std::size_t i = 0;
    std::uint64_t version = 0;
    while (i < scenes.size()) {
      const std::size_t k = std::min<std::size_t>(scenes.size() - i, 1 + rng() % 6);
      b.update_tree(tree, {scenes.begin() + static_cast<std::ptrdiff_t>(i), scenes.begin() + static_cast<std::ptrdiff_t>(i + k)});
      i += k;
      ++version;
      ASSERT_EQ(tree.version, version);
      const auto problems = check_invariants(tree);
      ASSERT_TRUE(problems.empty()) << problems.front();
    }
    std::size_t leaves = 0;
    visit(tree.root, [&](const TreeNode& n, const TreeNode* p) {
      if (p && n.level == 0) ++leaves;
    });
    EXPECT_EQ(leaves, scenes.size());
  }
}
