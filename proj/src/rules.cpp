#include "emtree/rules.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "emtree/log.hpp"
#include "emtree/prompts.hpp"

namespace emtree {

std::vector<std::string> RuleSet::texts() const {
  std::vector<std::string> out;
  out.reserve(rules.size());
  for (const auto& r : rules) out.push_back(r.text);
  return out;
}

std::string numbered_list(const std::vector<std::string>& lines) {
  std::string out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i > 0) out += '\n';
    out += std::to_string(i + 1) + ". " + lines[i];
  }
  return out;
}

std::string render_rules(const RuleSet& rules) {
  std::string out{kDefaultForgetLine};
  if (!rules.empty()) out += "\n" + numbered_list(rules.texts());
  return out;
}

std::vector<std::string> parse_rules_block(std::string_view block) {
  return parse_numbered_list(block).value_or(std::vector<std::string>{});
}

namespace {

std::vector<Rule> sanitize(std::vector<std::string> texts, const std::vector<Rule>& before,
                           const std::string& origin) {
  std::vector<Rule> out;
  std::set<std::string> seen;
  for (auto& t : texts) {
    auto line = trim(t);
    if (line.empty() || line.find('\n') != std::string::npos || !seen.insert(line).second) continue;
    std::string from = origin;
    for (const auto& r : before) {
      if (r.text == line) from = r.origin;
    }
    out.push_back({std::move(line), std::move(from)});
  }
  if (out.size() > kMaxRules) {
    logger()->warn("rule set capped at {} rules ({} proposed)", kMaxRules, out.size());
    out.resize(kMaxRules);
  }
  return out;
}

}  // namespace

RuleStore::RuleStore(std::vector<std::string> seed) {
  auto set = std::make_shared<RuleSet>();
  set->rules = sanitize(std::move(seed), {}, "seed");
  seed_ = set;
  current_ = set;
}

RuleSetPtr RuleStore::current() const {
  std::lock_guard lock(mutex_);
  return current_;
}

RuleSetPtr RuleStore::learn_from_feedback(LmGateway& gateway, std::string_view feedback,
                                          Timestamp at) {
  const auto text = trim(feedback);
  if (text.empty()) throw std::invalid_argument("feedback must not be empty");

  std::lock_guard learn_lock(learn_mutex_);

  const auto before = current();
  const auto origin = "feedback:" + std::to_string(before->version + 1);

  LmRequest request{PromptKind::rule_learning,
                    render_rule_learning_prompt({before->texts(), text})};
  std::optional<std::vector<std::string>> proposed;
  try {
    proposed = parse_numbered_list(gateway.complete(request).text);
  } catch (const BackendUnreachable& e) {
    logger()->warn("rule learning failed: {}", e.what());
  }

  auto next = std::make_shared<RuleSet>();
  next->version = before->version + 1;
  bool fallback = false;
  if (proposed) next->rules = sanitize(std::move(*proposed), before->rules, origin);
  if (!proposed || next->rules.empty()) {
    fallback = true;
    auto texts = before->texts();
    texts.push_back(text);
    next->rules = sanitize(std::move(texts), before->rules, origin);
  }

  std::lock_guard lock(mutex_);
  audit_.push_back({at, text, before->version, next->version, before->rules, next->rules, fallback});
  current_ = next;
  return current_;
}

std::vector<AuditRecord> RuleStore::audit() const {
  std::lock_guard lock(mutex_);
  return audit_;
}

RuleSet RuleStore::replay(const RuleSet& seed, const std::vector<AuditRecord>& audit) {
  RuleSet state = seed;
  for (const auto& rec : audit) {
    if (rec.before_version != state.version || rec.before != state.rules) {
      throw std::runtime_error("audit chain broken at version " + std::to_string(rec.before_version));
    }
    state.rules = rec.after;
    state.version = rec.after_version;
  }
  return state;
}

void RuleStore::save(const std::filesystem::path& path) const {
  const auto set = current();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kRulesFileHeader << '\n';
  for (const auto& r : set->rules) out << r.text << '\n';
}

RuleSet RuleStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRulesFileHeader) {
    throw std::runtime_error(path.string() + ": missing emtree-rules/1 header");
  }
  std::vector<std::string> texts;
  while (std::getline(in, line)) texts.push_back(line);
  RuleSet set;
  set.rules = sanitize(std::move(texts), {}, "seed");
  return set;
}

void RuleStore::append_audit_log(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& rec : audit()) {
    nlohmann::json j;
    j["timestamp"] = format_timestamp(rec.at);
    j["feedback"] = rec.feedback;
    j["before_version"] = rec.before_version;
    j["after_version"] = rec.after_version;
    j["before"] = nlohmann::json::array();
    for (const auto& r : rec.before) j["before"].push_back(r.text);
    j["after"] = nlohmann::json::array();
    for (const auto& r : rec.after) j["after"].push_back(r.text);
    j["fallback"] = rec.fallback;
    out << j.dump() << '\n';
  }
}

}  // namespace emtree
