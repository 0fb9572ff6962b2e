#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "emtree/lm.hpp"
#include "emtree/time.hpp"

namespace emtree {

struct Rule {
  std::string text;
  std::string origin = "seed";  // "seed" or "feedback:<n>"
  bool operator==(const Rule&) const = default;
};

struct RuleSet {
  std::vector<Rule> rules;
  std::uint64_t version = 0;

  std::vector<std::string> texts() const;
  bool empty() const { return rules.empty(); }
};

using RuleSetPtr = std::shared_ptr<const RuleSet>;

inline constexpr std::size_t kMaxRules = 50;
inline constexpr std::string_view kRulesFileHeader = "emtree-rules/1";
inline constexpr std::string_view kDefaultForgetLine =
    "Forget by default (relevance 0) unless one of the numbered rules asks to keep the item.";

// "1. a\n2. b"
std::string numbered_list(const std::vector<std::string>& lines);
// The standing default-forget line followed by the numbered rules.
std::string render_rules(const RuleSet& rules);
// Inverse of render_rules: returns the numbered rules only.
std::vector<std::string> parse_rules_block(std::string_view block);

struct AuditRecord {
  Timestamp at;
  std::string feedback;
  std::uint64_t before_version = 0;
  std::uint64_t after_version = 0;
  std::vector<Rule> before;
  std::vector<Rule> after;
  bool fallback = false;  // model output unusable, feedback appended verbatim
};

// Copy-on-write holder of the current rule set plus its audit trail.
class RuleStore {
 public:
  explicit RuleStore(std::vector<std::string> seed = {});

  RuleSetPtr current() const;
  const RuleSet& seed() const { return *seed_; }

  // One rule-learning call; version + 1 on success and on fallback.
  RuleSetPtr learn_from_feedback(LmGateway& gateway, std::string_view feedback, Timestamp at);

  std::vector<AuditRecord> audit() const;
  // Rebuilds the rule set by applying `audit` to `seed`; throws on a broken chain.
  static RuleSet replay(const RuleSet& seed, const std::vector<AuditRecord>& audit);

  void save(const std::filesystem::path& path) const;
  static RuleSet load(const std::filesystem::path& path);
  void append_audit_log(const std::filesystem::path& path) const;

 private:
  mutable std::mutex mutex_;
  std::mutex learn_mutex_;  // serializes learners; readers only take mutex_
  RuleSetPtr seed_;
  RuleSetPtr current_;
  std::vector<AuditRecord> audit_;
};

}  // namespace emtree
