#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "emtree/memory_tree.hpp"

namespace emtree {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kTreeFormatHeader = "emtree/1";

// Header line, one metadata line, then one JSON record per node in pre-order.
// Records carry the parent id; the synthetic root has id 0 and is stored in the metadata line.
std::string serialize_tree(const HistoryTree& tree);
HistoryTree parse_tree(std::string_view text);

// Writes through a temporary file and renames it into place.
void write_tree_file(const HistoryTree& tree, const std::filesystem::path& path);
HistoryTree read_tree_file(const std::filesystem::path& path);

}  // namespace emtree
