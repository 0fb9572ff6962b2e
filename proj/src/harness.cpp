#include "emtree/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "emtree/forgetting.hpp"
#include "emtree/log.hpp"
#include "emtree/text.hpp"

namespace emtree {

const std::vector<std::string>& household_objects() {
  static const std::vector<std::string> objects{"Knife", "Apple", "Potato", "Mug",     "Bowl", "Plate",
                                                "Tomato", "Bread", "Lettuce", "Egg", "Cup",  "Spatula"};
  return objects;
}

const std::vector<std::string>& household_receptacles() {
  static const std::vector<std::string> receptacles{"Sink",  "CounterTop", "DiningTable", "Fridge",
                                                    "Cabinet", "Shelf",    "Drawer",      "Microwave",
                                                    "Stove", "SideTable",  "Dishwasher",  "GarbageCan"};
  return receptacles;
}

namespace {

using Rng = std::mt19937_64;

int uniform(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <class T>
const T& choose(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(v.size()) - 1))];
}

std::string instance(Rng& rng, const std::string& type) { return type + "_" + std::to_string(uniform(rng, 0, 9)); }

const std::vector<std::string> kRooms{"Kitchen", "LivingRoom", "DiningRoom"};
const std::vector<std::string> kRequests{"Could you tidy up a bit?", "Please clear the table when you can.",
                                         "Time to clean up after dinner.", "Can you help me sort things out?"};

struct Step {
  std::string action;
  int scenes = 1;
  int occurrence = -1;  // index into History::occurrences
  bool pickup = false;
  bool place = false;
};

// Moves `t` into the 08:00-20:00 window, keeping it on or after the given time.
Timestamp into_day(Timestamp t, Rng& rng) {
  const auto tod = time_of_day(t);
  const auto midnight = t - Duration{tod};
  if (tod < 8 * 3600) return midnight + Duration{8 * 3600 + uniform(rng, 0, 59) * 60};
  if (tod > 20 * 3600) return midnight + Duration{86400 + 8 * 3600 + uniform(rng, 0, 59) * 60};
  return t;
}

}  // namespace

std::vector<SceneInstant> History::scenes_until(Timestamp t) const {
  std::vector<SceneInstant> out;
  for (const auto& e : events) {
    if (e.at > t) break;
    out.push_back(to_scene(e));
  }
  return out;
}

History synthesize_history(std::uint64_t seed, const GeneratorConfig& config, const std::vector<std::string>& repeated) {
  if (config.episodes < 2) {
    throw std::invalid_argument("at least two episodes are needed to repeat an object with a gap");
  }
  if (config.tasks_min < 1 || config.tasks_max < config.tasks_min ||
      config.tasks_max > static_cast<int>(household_objects().size())) {
    throw std::invalid_argument("bad task count range");
  }
  Rng rng(seed);

  std::vector<std::vector<std::string>> plan(static_cast<std::size_t>(config.episodes));
  for (auto& objects : plan) {
    auto pool = household_objects();
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(uniform(rng, config.tasks_min, config.tasks_max)));
    objects = std::move(pool);
  }
  for (const auto& obj : repeated) {
    auto holds = [&](std::size_t e) { return std::find(plan[e].begin(), plan[e].end(), obj) != plan[e].end(); };
    std::vector<std::size_t> with;
    for (std::size_t e = 0; e < plan.size(); ++e) {
      if (holds(e)) with.push_back(e);
    }
    // Force a first occurrence before the last episode, then a later repetition.
    if (with.empty() || with.front() + 1 == plan.size()) {
      const auto e = static_cast<std::size_t>(uniform(rng, 0, config.episodes - 2));
      plan[e].insert(plan[e].begin() + uniform(rng, 0, static_cast<int>(plan[e].size())), obj);
      with.insert(with.begin(), e);
    }
    if (with.size() < 2) {
      const auto e = static_cast<std::size_t>(uniform(rng, static_cast<int>(with.front()) + 1, config.episodes - 1));
      plan[e].insert(plan[e].begin() + uniform(rng, 0, static_cast<int>(plan[e].size())), obj);
    }
  }

  History h;
  Timestamp t = config.start + Duration{uniform(rng, 0, 59) * 60};
  for (std::size_t e = 0; e < plan.size(); ++e) {
    if (e > 0) t = into_day(t + Duration{uniform(rng, config.gap_hours_min * 60, config.gap_hours_max * 60) * 60}, rng);
    const auto room = choose(rng, kRooms);
    std::vector<Step> steps;
    const int noise = uniform(rng, config.noise_min, config.noise_max);
    std::vector<std::size_t> noise_after;
    for (int i = 0; i < noise; ++i) noise_after.push_back(static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(plan[e].size()) - 1)));

    for (std::size_t k = 0; k < plan[e].size(); ++k) {
      const auto& obj = plan[e][k];
      const auto item = instance(rng, obj);
      auto src = choose(rng, household_receptacles());
      auto dest = choose(rng, household_receptacles());
      while (dest == src) dest = choose(rng, household_receptacles());
      const auto src_i = instance(rng, src);
      const auto dest_i = instance(rng, dest);
      h.occurrences.push_back({obj, item, dest, static_cast<int>(e), {}, {}});
      const int occ = static_cast<int>(h.occurrences.size()) - 1;
      steps.push_back({"GoTo(" + src_i + ")", uniform(rng, 1, 2)});
      steps.push_back({"Pickup(" + item + ")", uniform(rng, 1, 2), occ, true, false});
      steps.push_back({"GoTo(" + dest_i + ")", uniform(rng, 1, 2)});
      steps.push_back({"Place(" + item + ", " + dest_i + ")", uniform(rng, 1, 2), occ, false, true});
      for (const auto after : noise_after) {
        if (after != k) continue;
        switch (uniform(rng, 0, 2)) {
          case 0: {
            const auto r = instance(rng, choose(rng, std::vector<std::string>{"Fridge", "Cabinet", "Drawer", "Microwave"}));
            steps.push_back({"Open(" + r + ")", 1});
            steps.push_back({"Close(" + r + ")", 1});
            break;
          }
          case 1: {
            const auto r = instance(rng, choose(rng, std::vector<std::string>{"Faucet", "StoveBurner", "CoffeeMachine"}));
            steps.push_back({"ToggleOn(" + r + ")", 1});
            steps.push_back({"ToggleOff(" + r + ")", 1});
            break;
          }
          default: steps.push_back({"LookAround", uniform(rng, 1, 2)}); break;
        }
      }
    }

    const auto begin = t;
    if (std::uniform_real_distribution<double>(0, 1)(rng) < config.speech_probability) {
      h.events.push_back({t, EventKind::speech, {{"text", choose(rng, kRequests)}, {"location", room}}, "user"});
      t += Duration{uniform(rng, 10, 30)};
    }
    for (const auto& s : steps) {
      const auto first = t;
      for (int i = 0; i < s.scenes; ++i) {
        if (i > 0) t += Duration{uniform(rng, 10, 20)};
        h.events.push_back({t, EventKind::scene, {{"action", s.action}, {"location", room}}, "camera"});
      }
      if (s.occurrence >= 0) {
        auto& o = h.occurrences[static_cast<std::size_t>(s.occurrence)];
        if (s.pickup) o.pickup = {first, t};
        if (s.place) o.place = {first, t};
      }
      t += Duration{uniform(rng, 20, 90)};
    }
    h.episodes.push_back({begin, h.events.back().at});
  }
  return h;
}

std::vector<Occurrence> find_occurrences(const std::vector<EventRecord>& events, const std::vector<TimeSpan>& episodes) {
  static const std::regex pickup_re(R"(^Pickup\(([A-Za-z]+)(_\w+)?\)$)");
  static const std::regex place_re(R"(^Place\(([A-Za-z]+)(_\w+)?,\s*([A-Za-z]+)(_\w+)?\)$)");
  std::vector<Occurrence> out;
  std::optional<std::size_t> open;  // occurrence waiting for its placement
  std::string last_action;
  for (const auto& e : events) {
    std::string action;
    for (const auto& [k, v] : e.attributes) {
      if (k == "action") action = v;
    }
    int episode = 0;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      if (episodes[i].contains(e.at)) episode = static_cast<int>(i);
    }
    std::smatch m;
    const bool repeat = action == last_action;
    last_action = action;
    if (std::regex_match(action, m, pickup_re)) {
      if (repeat && open) {
        out[*open].pickup.end = e.at;
        continue;
      }
      out.push_back({m[1].str(), m[1].str() + m[2].str(), "", episode, TimeSpan::at(e.at), {}});
      open = out.size() - 1;
    } else if (std::regex_match(action, m, place_re)) {
      if (!open) continue;
      auto& o = out[*open];
      if (o.destination.empty()) {
        o.destination = m[3].str();
        o.place = TimeSpan::at(e.at);
      } else if (repeat) {
        o.place.end = e.at;
      }
    } else if (open && !out[*open].destination.empty()) {
      open.reset();
    }
  }
  std::erase_if(out, [](const Occurrence& o) { return o.destination.empty(); });
  return out;
}

History synthesize_history(const std::vector<std::vector<EventRecord>>& episodes, int count, std::uint64_t seed,
                           const GeneratorConfig& config) {
  if (count < 2 || episodes.empty()) {
    throw std::invalid_argument("at least two episodes are needed to repeat an object with a gap");
  }
  for (const auto& ep : episodes) {
    if (ep.empty()) throw std::invalid_argument("empty episode");
  }
  Rng rng(seed);
  std::vector<std::size_t> picks;
  for (int i = 0; i < count; ++i) picks.push_back(static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(episodes.size()) - 1)));

  History h;
  Timestamp t = config.start + Duration{uniform(rng, 0, 59) * 60};
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (i > 0) t = into_day(t + Duration{uniform(rng, config.gap_hours_min * 60, config.gap_hours_max * 60) * 60}, rng);
    const auto& ep = episodes[picks[i]];
    const auto shift = t - ep.front().at;
    for (auto e : ep) {
      e.at += shift;
      h.events.push_back(std::move(e));
    }
    h.episodes.push_back({t, h.events.back().at});
    t = h.events.back().at;
  }
  h.occurrences = find_occurrences(h.events, h.episodes);
  std::map<std::string, std::set<int>> seen;
  for (const auto& o : h.occurrences) seen[o.object].insert(o.episode);
  if (std::none_of(seen.begin(), seen.end(), [](const auto& kv) { return kv.second.size() >= 2; })) {
    throw std::invalid_argument("no object is transported in two different episodes; add episodes or raise the count");
  }
  return h;
}

namespace {

// "a knife", "an egg"
std::string with_article(const std::string& type) {
  const auto lower = to_lower(type);
  return (std::string{"aeiou"}.find(lower.front()) != std::string::npos ? "an " : "a ") + lower;
}

Question make_question(const Occurrence& o, QuestionType type, bool first, Duration offset) {
  Question q;
  const auto obj = with_article(o.object);
  const std::string which = first ? "first" : "last";
  if (type == QuestionType::pickup_time) {
    q.text = "When did you " + which + " pick up " + obj + "?";
    q.target = o.pickup;
    q.ground_truth = format_minute(o.pickup.start);
  } else {
    q.text = "Where did you " + which + " transport " + obj + " to?";
    q.target = o.place;
    q.ground_truth = o.destination;
  }
  q.ask_at = q.target.end + offset;
  q.round = first ? 1 : 2;
  return q;
}

}  // namespace

std::vector<QaPair> generate_two_round_qa(const History& history, int pairs, Duration offset) {
  // Objects in order of their first transport, kept when they recur in a later episode.
  std::vector<std::string> order;
  std::map<std::string, std::set<int>> episodes;
  for (const auto& o : history.occurrences) {
    if (!episodes.count(o.object)) order.push_back(o.object);
    episodes[o.object].insert(o.episode);
  }
  std::vector<QaPair> out;
  for (const auto& obj : order) {
    if (static_cast<int>(out.size()) == pairs) break;
    if (episodes[obj].size() < 2) continue;
    const Occurrence* first = nullptr;
    const Occurrence* last = nullptr;
    for (const auto& o : history.occurrences) {
      if (o.object != obj) continue;
      if (!first) first = &o;
      last = &o;
    }
    QaPair p;
    p.id = static_cast<int>(out.size());
    p.type = p.id % 2 == 0 ? QuestionType::pickup_time : QuestionType::destination;
    p.object = obj;
    p.first = make_question(*first, p.type, true, offset);
    p.second = make_question(*last, p.type, false, offset);
    const auto o = with_article(obj);
    p.feedback = p.type == QuestionType::pickup_time ? "You should always remember when you pick up " + o + "."
                                                     : "You should always remember where you transport " + o + " to.";
    out.push_back(std::move(p));
  }
  if (static_cast<int>(out.size()) < pairs) {
    logger()->warn("history repeats only {} objects across episodes, {} question pairs requested", out.size(), pairs);
  }
  return out;
}

Scenario make_scenario(std::uint64_t seed, const GeneratorConfig& generator, int pairs, Duration offset) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  auto targets = household_objects();
  std::shuffle(targets.begin(), targets.end(), rng);
  targets.resize(static_cast<std::size_t>(std::clamp(pairs, 0, static_cast<int>(targets.size()))));
  Scenario s;
  s.seed = seed;
  s.history = synthesize_history(seed, generator, targets);
  s.pairs = generate_two_round_qa(s.history, pairs, offset);
  return s;
}

// ---- judging -----------------------------------------------------------------

Verdict judge_answer(const Question& question, QuestionType type, const QaResult& result) {
  const auto& a = result.answer;
  if (type == QuestionType::pickup_time) {
    if (a.find(question.ground_truth) != std::string::npos) return Verdict::correct;
    const auto truth = parse_timestamp(question.ground_truth);
    static const std::regex minute_re(R"(\d{4}/\d{2}/\d{2} \d{2}:\d{2})");
    for (auto it = std::sregex_iterator(a.begin(), a.end(), minute_re); it != std::sregex_iterator(); ++it) {
      const auto t = parse_timestamp(it->str());
      if (truth && t && std::llabs((*t - *truth).count()) <= 30 * 60) return Verdict::partially_correct;
    }
  } else if (contains_term(a, question.ground_truth)) {
    return Verdict::correct;
  }
  if (indicates_forgotten(a)) return Verdict::forgotten;
  const auto lower = to_lower(a);
  if (result.gave_up || trim(a).empty() || lower.find("do not know") != std::string::npos ||
      lower.find("don't know") != std::string::npos) {
    return Verdict::no_answer;
  }
  return Verdict::wrong;
}

Verdict judge_with_model(LmGateway& gateway, const Question& question, QuestionType type, const QaResult& result) {
  try {
    const auto reply = gateway.complete(
        {PromptKind::judge, render_judge_prompt({question.text, question.ground_truth, result.answer})});
    if (const auto v = parse_judge(reply.text)) return *v;
  } catch (const std::exception&) {
  }
  return judge_answer(question, type, result);
}

// ---- variants ------------------------------------------------------------------

const std::vector<Variant>& standard_variants() {
  using C = Construction;
  static const std::vector<Variant> variants{
      {"A", C::online, true, true, true, true},     {"AA", C::online, true, true, true, false},
      {"B", C::online, true, true, false, false},   {"C", C::online, true, false, false, true},
      {"D", C::online, true, false, false, false},  {"E", C::online, false, false, false, true},
      {"F", C::online, false, false, false, false}, {"G", C::offline, true, true, true, true},
      {"H", C::offline, true, true, false, false},  {"I", C::offline, true, false, false, false},
      {"J", C::offline, false, false, false, false}, {"K", C::flat, true, true, true, true},
      {"L", C::flat, false, false, false, false},
  };
  return variants;
}

const Variant& variant_by_name(const std::string& name) {
  for (const auto& v : standard_variants()) {
    if (v.name == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + name + "'");
}

// ---- experiments -----------------------------------------------------------------

Duration HarnessConfig::question_offset() const { return builder.lifetime(0) + std::chrono::hours(1); }

ScriptedConfig household_scripted_config() {
  ScriptedConfig c;
  c.grouping = GroupingPolicy::append_to_latest;
  c.vocabulary = household_objects();
  return c;
}

namespace {

struct Asked {
  const QaPair* pair;
  const Question* question;
};

std::vector<Asked> question_schedule(const Scenario& s) {
  std::vector<Asked> out;
  for (const auto& p : s.pairs) {
    out.push_back({&p, &p.first});
    out.push_back({&p, &p.second});
  }
  std::stable_sort(out.begin(), out.end(), [](const Asked& a, const Asked& b) {
    return std::tie(a.question->ask_at, a.question->round) < std::tie(b.question->ask_at, b.question->round);
  });
  return out;
}

std::shared_ptr<LmBackend> make_backend(const HarnessConfig& config) {
  if (config.backend) return config.backend();
  return std::make_shared<ScriptedBackend>(household_scripted_config());
}

BuilderConfig builder_for(const Variant& v, const HarnessConfig& config) {
  auto b = config.builder;
  if (v.construction == Construction::flat) {
    b.max_depth = 3;
    b.domain_levels = true;
    b.root_summary = false;
  }
  return b;
}

QuestionOutcome outcome_for(const Asked& a, const QaResult& r, Verdict verdict, std::optional<double> ratio) {
  QuestionOutcome o;
  o.pair = a.pair->id;
  o.round = a.question->round;
  o.question = a.question->text;
  o.ground_truth = a.question->ground_truth;
  o.answer = r.answer;
  o.verdict = verdict;
  o.forgotten_ratio = ratio;
  o.forgotten_indicated = r.forgotten_indicated;
  o.qa_tokens = r.usage.total();
  o.steps = r.trace.size();
  return o;
}

Verdict grade(LmGateway& gateway, const HarnessConfig& config, const Asked& a, const QaResult& r) {
  return config.model_judge ? judge_with_model(gateway, *a.question, a.pair->type, r)
                            : judge_answer(*a.question, a.pair->type, r);
}

std::int64_t build_usage(const UsageLedger& l) {
  return l.of(PromptKind::grouping).total() + l.of(PromptKind::simple_summarize).total();
}

ExperimentReport run_incremental(const Variant& v, const Scenario& s, const HarnessConfig& config) {
  auto gateway = std::make_shared<LmGateway>(make_backend(config));
  ServiceConfig sc;
  sc.builder = builder_for(v, config);
  sc.batch_cap = config.batch_cap;
  sc.forgetting = v.time_forgetting;
  sc.relevance = v.relevance_forgetting;
  sc.rules_for_forgetting = v.rules_for_forgetting;
  sc.rules_for_summaries = v.rules_for_summaries;
  sc.qa_mode = v.construction == Construction::flat ? QaMode::flat : QaMode::tree;
  sc.agent = config.agent;
  const auto& events = s.history.events;
  auto clock = std::make_shared<VirtualClock>(events.front().at);
  MemoryService service(gateway, sc, clock);

  ExperimentReport report;
  double node_sum = 0;
  std::size_t steps = 0;
  const auto schedule = question_schedule(s);
  std::size_t next = 0;
  auto ask_due = [&](std::optional<Timestamp> before) {
    for (; next < schedule.size() && (!before || schedule[next].question->ask_at < *before); ++next) {
      const auto& a = schedule[next];
      clock->advance_to(a.question->ask_at);
      if (sc.forgetting) service.sweep_now();
      const auto snap = service.latest_snapshot();
      const auto ratio = forgotten_ratio(*snap, a.question->target);
      const auto r = service.ask(a.question->text);
      report.outcomes.push_back(outcome_for(a, r, grade(*gateway, config, a, r), ratio));
      if (a.question->round == 1 && v.learns()) {
        service.feedback(a.pair->feedback);
        ++report.rules_learned;
      }
    }
  };
  for (const auto& e : events) {
    ask_due(e.at);
    service.ingest(e);
    service.drain();
    node_sum += static_cast<double>(count_nodes(*service.latest_snapshot(), kGoalLevel));
    ++steps;
  }
  ask_due(std::nullopt);
  if (sc.forgetting) service.sweep_now();

  const auto& ledger = gateway->ledger();
  report.final_nodes = count_nodes(*service.latest_snapshot(), kGoalLevel);
  report.average_nodes = steps ? node_sum / static_cast<double>(steps) : 0;
  report.relevance_tokens = ledger.of(PromptKind::relevance_estimation).total();
  report.grouping_tokens = build_usage(ledger);
  return report;
}

ExperimentReport run_offline(const Variant& v, const Scenario& s, const HarnessConfig& config) {
  auto gateway = std::make_shared<LmGateway>(make_backend(config));
  const auto bc = builder_for(v, config);
  RuleStore rules;
  ForgettingEngine engine(gateway.get(), bc);
  const SweepOptions sweep{v.relevance_forgetting, std::nullopt};
  auto rules_for_sweep = [&] { return v.rules_for_forgetting ? rules.current() : std::make_shared<RuleSet>(rules.seed()); };

  ExperimentReport report;
  double node_sum = 0;
  std::size_t steps = 0;
  for (const auto& a : question_schedule(s)) {
    const auto at = a.question->ask_at;
    TreeBuilder builder(*gateway, bc);
    builder.set_summary_rules(v.rules_for_summaries ? rules.current() : nullptr);
    const auto before = build_usage(gateway->ledger());
    auto tree = build_tree(builder, s.history.scenes_until(at));
    const auto build = build_usage(gateway->ledger()) - before;
    if (v.time_forgetting) engine.sweep(tree, at, *rules_for_sweep(), nullptr, sweep);
    node_sum += static_cast<double>(count_nodes(tree, kGoalLevel));
    ++steps;
    const auto ratio = forgotten_ratio(tree, a.question->target);
    const auto r = answer_question(*gateway, tree, a.question->text, at, QaMode::tree, config.agent);
    auto o = outcome_for(a, r, grade(*gateway, config, a, r), ratio);
    o.build_tokens = build;
    report.outcomes.push_back(std::move(o));
    if (a.question->round == 1 && v.learns()) {
      rules.learn_from_feedback(*gateway, a.pair->feedback, at);
      ++report.rules_learned;
    }
  }
  const auto& ledger = gateway->ledger();
  report.relevance_tokens = ledger.of(PromptKind::relevance_estimation).total();
  report.grouping_tokens = build_usage(ledger);

  // Size of the memory at the end of the history, built with its own gateway so that the
  // question-time costs above stay untouched.
  LmGateway final_gateway(make_backend(config));
  TreeBuilder builder(final_gateway, bc);
  builder.set_summary_rules(v.rules_for_summaries ? rules.current() : nullptr);
  auto tree = build_tree(builder, s.history.scenes_until(s.history.events.back().at));
  auto end = s.history.events.back().at;
  for (const auto& p : s.pairs) end = std::max({end, p.first.ask_at, p.second.ask_at});
  if (v.time_forgetting) ForgettingEngine(&final_gateway, bc).sweep(tree, end, *rules_for_sweep(), nullptr, sweep);
  report.final_nodes = count_nodes(tree, kGoalLevel);
  report.average_nodes = steps ? node_sum / static_cast<double>(steps) : 0;
  return report;
}

}  // namespace

std::optional<double> ExperimentReport::forgetting_rate(int round) const {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& o : outcomes) {
    if (o.round != round || !o.forgotten_ratio) continue;
    sum += *o.forgotten_ratio;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return 100.0 * sum / static_cast<double>(n);
}

double ExperimentReport::cost_per_question() const {
  if (outcomes.empty()) return 0;
  double total = 0;
  for (const auto& o : outcomes) total += static_cast<double>(o.qa_tokens + o.build_tokens);
  return total / static_cast<double>(outcomes.size());
}

ExperimentReport run_experiment(const Variant& variant, const Scenario& scenario, const HarnessConfig& config) {
  if (scenario.history.events.empty()) throw std::invalid_argument("empty history");
  auto report = variant.construction == Construction::offline ? run_offline(variant, scenario, config)
                                                              : run_incremental(variant, scenario, config);
  report.variant = variant.name;
  report.seed = scenario.seed;
  for (const auto& o : report.outcomes) {
    report.qa_tokens += o.qa_tokens;
    report.build_tokens += o.build_tokens;
  }
  return report;
}

std::vector<ExperimentReport> run_matrix(const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                                         const HarnessConfig& config, unsigned threads) {
  std::vector<Scenario> scenarios;
  scenarios.reserve(seeds.size());
  for (const auto seed : seeds) {
    scenarios.push_back(make_scenario(seed, config.generator, config.qa_pairs, config.question_offset()));
  }
  return run_matrix(variants, scenarios, config, threads);
}

std::vector<ExperimentReport> run_matrix(const std::vector<Variant>& variants, const std::vector<Scenario>& scenarios,
                                         const HarnessConfig& config, unsigned threads) {
  std::vector<ExperimentReport> out(variants.size() * scenarios.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (auto i = next++; i < out.size(); i = next++) {
      try {
        out[i] = run_experiment(variants[i / scenarios.size()], scenarios[i % scenarios.size()], config);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < std::max(1u, threads); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

namespace {

int rank(Verdict v) {
  if (v == Verdict::correct) return 2;
  if (v == Verdict::partially_correct) return 1;
  return 0;
}

double pct(std::size_t n, std::size_t d) { return d == 0 ? 0.0 : 100.0 * static_cast<double>(n) / static_cast<double>(d); }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : "--"; }

std::string one_line(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
  return s;
}

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<ExperimentReport>& reports) {
  std::vector<AggregateRow> rows;
  std::map<std::string, std::size_t> index;
  struct Acc {
    std::size_t q = 0, c = 0, p = 0, q1 = 0, c1 = 0, p1 = 0, q2 = 0, c2 = 0, p2 = 0, pairs = 0, up = 0, same = 0;
    double fr1 = 0, fr2 = 0;
    std::size_t fr1_n = 0, fr2_n = 0;
    double qa = 0, build = 0;
  };
  std::vector<Acc> acc;
  for (const auto& r : reports) {
    if (!index.count(r.variant)) {
      index[r.variant] = rows.size();
      rows.push_back({});
      rows.back().variant = r.variant;
      for (const auto& v : standard_variants()) {
        if (v.name == r.variant) rows.back().flat = v.construction == Construction::flat;
      }
      acc.push_back({});
    }
    auto& row = rows[index[r.variant]];
    auto& a = acc[index[r.variant]];
    ++row.runs;
    row.n_final += static_cast<double>(r.final_nodes);
    row.n_avg += r.average_nodes;
    row.c_f += static_cast<double>(r.relevance_tokens);
    std::map<int, std::pair<int, int>> ranks;
    for (const auto& o : r.outcomes) {
      const bool c = o.verdict == Verdict::correct;
      const bool p = c || o.verdict == Verdict::partially_correct;
      ++a.q;
      a.c += c;
      a.p += p;
      a.qa += static_cast<double>(o.qa_tokens);
      a.build += static_cast<double>(o.build_tokens);
      if (o.round == 1) {
        ++a.q1, a.c1 += c, a.p1 += p;
        ranks[o.pair].first = rank(o.verdict);
      } else {
        ++a.q2, a.c2 += c, a.p2 += p;
        ranks[o.pair].second = rank(o.verdict);
      }
    }
    for (const auto& [id, rk] : ranks) {
      ++a.pairs;
      a.up += rk.second > rk.first;
      a.same += rk.second == rk.first;
    }
    if (const auto f = r.forgetting_rate(1)) a.fr1 += *f, ++a.fr1_n;
    if (const auto f = r.forgetting_rate(2)) a.fr2 += *f, ++a.fr2_n;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& row = rows[i];
    const auto& a = acc[i];
    const auto runs = static_cast<double>(row.runs);
    row.s_c = pct(a.c, a.q);
    row.s_p = pct(a.p, a.q);
    row.s_c1 = pct(a.c1, a.q1);
    row.s_p1 = pct(a.p1, a.q1);
    row.s_c2 = pct(a.c2, a.q2);
    row.s_p2 = pct(a.p2, a.q2);
    row.s_up = pct(a.up, a.pairs);
    row.s_same = pct(a.same, a.pairs);
    if (a.fr1_n) row.fr1 = a.fr1 / static_cast<double>(a.fr1_n);
    if (a.fr2_n) row.fr2 = a.fr2 / static_cast<double>(a.fr2_n);
    row.n_final /= runs;
    row.n_avg /= runs;
    row.c_f /= runs;
    row.c_qa = a.q ? a.qa / static_cast<double>(a.q) : 0;
    row.c_build = a.q ? a.build / static_cast<double>(a.q) : 0;
  }
  return rows;
}

std::string report_tsv(const std::vector<AggregateRow>& rows) {
  std::ostringstream out;
  out << "variant\truns\tS_c\tS_p\tS_up\tS_eq\tS_c1\tS_p1\tS_c2\tS_p2\tFR1\tFR2\tN_f\tN_avg\tC_qa\tC_build\tC_f\n";
  for (const auto& r : rows) {
    out << r.variant << '\t' << r.runs << '\t' << num(r.s_c) << '\t' << num(r.s_p) << '\t' << num(r.s_up) << '\t'
        << num(r.s_same) << '\t' << num(r.s_c1) << '\t' << num(r.s_p1) << '\t' << num(r.s_c2) << '\t'
        << num(r.s_p2) << '\t' << opt_num(r.fr1) << '\t' << opt_num(r.fr2) << '\t'
        << (r.flat ? "--" : num(r.n_final)) << '\t' << (r.flat ? "--" : num(r.n_avg)) << '\t' << num(r.c_qa)
        << '\t' << num(r.c_build) << '\t' << num(r.c_f) << '\n';
  }
  return out.str();
}

std::string details_tsv(const std::vector<ExperimentReport>& reports) {
  std::ostringstream out;
  out << "variant\tseed\tpair\tround\tquestion\tground_truth\tanswer\tverdict\tforgotten_ratio\tqa_tokens\tbuild_tokens\tsteps\n";
  for (const auto& r : reports) {
    for (const auto& o : r.outcomes) {
      out << r.variant << '\t' << r.seed << '\t' << o.pair << '\t' << o.round << '\t' << o.question << '\t'
          << o.ground_truth << '\t' << one_line(o.answer) << '\t' << to_string(o.verdict) << '\t'
          << opt_num(o.forgotten_ratio) << '\t'
          << o.qa_tokens << '\t' << o.build_tokens << '\t' << o.steps << '\n';
    }
  }
  return out.str();
}

}  // namespace emtree
