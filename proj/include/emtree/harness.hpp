#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "emtree/events.hpp"
#include "emtree/lm.hpp"
#include "emtree/prompts.hpp"
#include "emtree/scripted.hpp"
#include "emtree/service.hpp"

namespace emtree {

// ---- synthetic household histories -----------------------------------------

// Object types the household robot handles; also the scripted model's vocabulary.
const std::vector<std::string>& household_objects();
// Receptacles used as sources and destinations.
const std::vector<std::string>& household_receptacles();

struct GeneratorConfig {
  int episodes = 5;
  int tasks_min = 3;
  int tasks_max = 5;
  int noise_min = 1;  // non-transport actions per episode
  int noise_max = 3;
  int gap_hours_min = 3;
  int gap_hours_max = 48;
  double speech_probability = 0.5;
  Timestamp start = make_timestamp(2024, 4, 22, 8, 0);
};

// One transport of an object: GoTo(src), Pickup(obj), GoTo(dest), Place(obj, dest).
struct Occurrence {
  std::string object;    // type, e.g. "Knife"
  std::string instance;  // e.g. "Knife_3"
  std::string destination;  // receptacle type
  int episode = 0;
  TimeSpan pickup;
  TimeSpan place;
};

struct History {
  std::vector<EventRecord> events;  // chronological
  std::vector<TimeSpan> episodes;
  std::vector<Occurrence> occurrences;

  std::vector<SceneInstant> scenes_until(Timestamp t) const;
};

// Deterministic for a given seed. `repeated` object types are guaranteed to be transported in
// at least two different episodes; throws std::invalid_argument with fewer than two episodes.
History synthesize_history(std::uint64_t seed, const GeneratorConfig& config = {},
                           const std::vector<std::string>& repeated = {});

// Concatenates `count` episodes drawn from `episodes` (each shifted to a fresh date, gaps as
// configured). Throws std::invalid_argument when no object recurs across two drawn episodes.
History synthesize_history(const std::vector<std::vector<EventRecord>>& episodes, int count, std::uint64_t seed,
                           const GeneratorConfig& config = {});

// Transports recognised from "Pickup(X_n)" followed by "Place(X_n, Dest_m)" scene actions.
std::vector<Occurrence> find_occurrences(const std::vector<EventRecord>& events, const std::vector<TimeSpan>& episodes);

// ---- two-round question answering ------------------------------------------

enum class QuestionType { pickup_time, destination };

struct Question {
  std::string text;
  Timestamp ask_at;
  std::string ground_truth;
  TimeSpan target;
  int round = 1;
};

struct QaPair {
  int id = 0;
  QuestionType type = QuestionType::pickup_time;
  std::string object;
  Question first;   // about the first occurrence, asked soon after it
  Question second;  // about the last occurrence, asked soon after it
  std::string feedback;
};

// `offset` is the delay between an occurrence and its question. Returns fewer pairs (with a
// logged warning) when not enough objects recur.
std::vector<QaPair> generate_two_round_qa(const History& history, int pairs, Duration offset);

// History plus questions for one seed; the questioned objects are chosen first.
struct Scenario {
  std::uint64_t seed = 0;
  History history;
  std::vector<QaPair> pairs;
};
Scenario make_scenario(std::uint64_t seed, const GeneratorConfig& generator, int pairs, Duration offset);

// Rule-based grading: exact minute or destination match is correct, up to 30 minutes off is
// partially correct.
Verdict judge_answer(const Question& question, QuestionType type, const QaResult& result);
// Model-based grading, falling back to judge_answer when the reply is unusable.
Verdict judge_with_model(LmGateway& gateway, const Question& question, QuestionType type,
                         const QaResult& result);

// ---- variants ----------------------------------------------------------------

enum class Construction { online, offline, flat };

struct Variant {
  std::string name;
  Construction construction = Construction::online;
  bool time_forgetting = true;
  bool relevance_forgetting = true;
  bool rules_for_forgetting = true;
  bool rules_for_summaries = true;

  bool learns() const { return rules_for_forgetting || rules_for_summaries; }
};

// A, AA, B, C, D, E, F (online), G, H, I, J (rebuilt at question time), K, L (flat goal list).
const std::vector<Variant>& standard_variants();
const Variant& variant_by_name(const std::string& name);

// ---- experiments ---------------------------------------------------------------

using BackendFactory = std::function<std::shared_ptr<LmBackend>()>;

struct HarnessConfig {
  GeneratorConfig generator;
  int qa_pairs = 2;
  BuilderConfig builder;
  AgentConfig agent;
  std::size_t batch_cap = 64;
  bool model_judge = false;
  // Defaults to the scripted model over the household vocabulary.
  BackendFactory backend;

  Duration question_offset() const;
};

ScriptedConfig household_scripted_config();

struct QuestionOutcome {
  int pair = 0;
  int round = 1;
  std::string question;
  std::string ground_truth;
  std::string answer;
  Verdict verdict = Verdict::wrong;
  std::optional<double> forgotten_ratio;
  bool forgotten_indicated = false;
  std::int64_t qa_tokens = 0;
  std::int64_t build_tokens = 0;  // rebuilding the tree for this question
  std::size_t steps = 0;
};

struct ExperimentReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<QuestionOutcome> outcomes;
  std::size_t final_nodes = 0;   // goal level and above
  double average_nodes = 0;      // per processed step
  std::int64_t qa_tokens = 0;
  std::int64_t build_tokens = 0;
  std::int64_t relevance_tokens = 0;
  std::int64_t grouping_tokens = 0;
  std::size_t rules_learned = 0;

  // Percentage of first- and second-round questions whose target was fully forgotten.
  std::optional<double> forgetting_rate(int round) const;
  double cost_per_question() const;  // QA plus rebuild tokens
};

ExperimentReport run_experiment(const Variant& variant, const Scenario& scenario, const HarnessConfig& config);

// Runs every variant on every seed over `threads` workers. Results are ordered by variant
// then seed, independent of scheduling.
std::vector<ExperimentReport> run_matrix(const std::vector<Variant>& variants,
                                         const std::vector<std::uint64_t>& seeds, const HarnessConfig& config,
                                         unsigned threads = 1);
std::vector<ExperimentReport> run_matrix(const std::vector<Variant>& variants, const std::vector<Scenario>& scenarios,
                                         const HarnessConfig& config, unsigned threads = 1);

struct AggregateRow {
  std::string variant;
  std::size_t runs = 0;
  double s_c = 0, s_p = 0;        // correct, correct or partially correct (both rounds)
  double s_up = 0, s_same = 0;    // second round better than / equal to the first
  double s_c1 = 0, s_p1 = 0, s_c2 = 0, s_p2 = 0;
  std::optional<double> fr1, fr2;
  double n_final = 0, n_avg = 0;
  double c_qa = 0, c_build = 0, c_f = 0;
  bool flat = false;
};

std::vector<AggregateRow> aggregate(const std::vector<ExperimentReport>& reports);
std::string report_tsv(const std::vector<AggregateRow>& rows);
std::string details_tsv(const std::vector<ExperimentReport>& reports);

}  // namespace emtree
