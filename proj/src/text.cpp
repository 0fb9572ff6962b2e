#include "emtree/text.hpp"

#include <algorithm>
#include <cctype>

#include "emtree/prompts.hpp"

namespace emtree {

namespace {

bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

void push_unique(std::vector<std::string>& out, std::string value) {
  if (value.empty()) return;
  if (std::find(out.begin(), out.end(), value) == out.end()) out.push_back(std::move(value));
}

std::vector<std::string> split_on(std::string_view s, std::string_view sep) {
  std::vector<std::string> out;
  while (true) {
    const auto pos = s.find(sep);
    out.push_back(trim(s.substr(0, pos)));
    if (pos == std::string_view::npos) break;
    s.remove_prefix(pos + sep.size());
  }
  return out;
}

std::string leading_type(std::string_view arg) {
  const auto t = trim(arg);
  std::string out;
  for (const char c : t) {
    if (!is_alpha(c)) break;
    out += c;
  }
  return out;
}

constexpr std::string_view kHandled = "Handled: ";

}  // namespace

bool contains_term(std::string_view text, std::string_view term) {
  if (term.empty()) return false;
  const auto hay = to_lower(text);
  const auto needle = to_lower(term);
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
    const bool left_ok = pos == 0 || !is_alpha(hay[pos - 1]);
    const auto end = pos + needle.size();
    const bool right_ok = end >= hay.size() || !is_alpha(hay[end]);
    if (left_ok && right_ok) return true;
  }
  return false;
}

std::vector<std::string> matching_terms(std::string_view text, const std::vector<std::string>& vocabulary) {
  std::vector<std::string> out;
  for (const auto& term : vocabulary) {
    if (contains_term(text, term)) out.push_back(term);
  }
  return out;
}

std::vector<std::string> object_types(std::string_view phrase) {
  std::vector<std::string> out;
  if (starts_with(phrase, kHandled)) {
    for (auto& part : split_on(phrase.substr(kHandled.size()), ",")) push_unique(out, leading_type(part));
    return out;
  }
  for (auto open = phrase.find('('); open != std::string_view::npos; open = phrase.find('(', open + 1)) {
    const auto close = phrase.find(')', open);
    if (close == std::string_view::npos) break;
    for (auto& arg : split_on(phrase.substr(open + 1, close - open - 1), ",")) {
      push_unique(out, leading_type(arg));
    }
  }
  return out;
}

std::string condense_lines(const std::vector<std::string>& lines,
                           const std::vector<std::string>& keep_terms, std::size_t limit) {
  std::vector<std::string> phrases;
  for (const auto& line : lines) {
    for (auto& p : split_on(line, "; ")) push_unique(phrases, std::move(p));
  }
  std::string joined;
  for (const auto& p : phrases) joined += (joined.empty() ? "" : "; ") + p;
  if (joined.size() <= limit) return joined;

  std::vector<std::string> keep;
  std::vector<std::string> types;
  for (const auto& p : phrases) {
    for (auto& t : object_types(p)) push_unique(types, std::move(t));
    if (starts_with(p, kHandled)) continue;
    if (std::any_of(keep_terms.begin(), keep_terms.end(),
                    [&](const auto& term) { return contains_term(p, term); })) {
      keep.push_back(p);
    }
  }
  // Newest kept phrases win when they do not all fit.
  std::string kept;
  for (auto it = keep.rbegin(); it != keep.rend(); ++it) {
    if (kept.size() + it->size() + 2 > limit) break;
    kept = kept.empty() ? *it : *it + "; " + kept;
  }
  if (types.empty()) return joined.substr(0, limit);
  std::string handled{kHandled};
  for (std::size_t i = 0; i < types.size(); ++i) handled += (i ? ", " : "") + types[i];
  return kept.empty() ? handled : kept + "; " + handled;
}

}  // namespace emtree
