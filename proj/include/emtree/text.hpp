#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace emtree {

// Case-insensitive match of `term` delimited by non-letters ("Cup_1" matches "cup", "Cupboard" does not).
bool contains_term(std::string_view text, std::string_view term);

// Terms of `vocabulary` that occur in `text`, in vocabulary order.
std::vector<std::string> matching_terms(std::string_view text, const std::vector<std::string>& vocabulary);

// Object types named in an activity phrase: "Place(Knife_0, CounterTop_1)" -> {Knife, CounterTop};
// "Handled: Knife, Mug" -> {Knife, Mug}.
std::vector<std::string> object_types(std::string_view phrase);

// Mechanical summary of activity lines: the distinct "; "-separated phrases joined with "; " when
// that fits in `limit` characters, otherwise the phrases mentioning a `keep_terms` entry followed
// by "Handled: <object types>".
std::string condense_lines(const std::vector<std::string>& lines,
                           const std::vector<std::string>& keep_terms = {}, std::size_t limit = 160);

}  // namespace emtree
