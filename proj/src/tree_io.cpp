#include "emtree/tree_io.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace emtree {

using nlohmann::ordered_json;

namespace {

ordered_json node_record(const TreeNode& node, NodeId parent) {
  ordered_json rec;
  rec["id"] = node.id;
  rec["parent"] = parent;
  rec["level"] = node.level;
  rec["kind"] = std::string{to_string(node.kind)};
  rec["start"] = node.span.start.seconds;
  rec["end"] = node.span.end.seconds;
  rec["expiration"] = node.expiration.seconds;
  if (node.never_expires) rec["never_expires"] = true;
  rec["summary"] = node.summary;
  rec["placeholder"] = node.placeholder;
  if (node.placeholder) rec["short_summary"] = node.short_summary;
  if (node.scene) {
    ordered_json attrs = ordered_json::array();
    for (const auto& [k, v] : node.scene->attributes) attrs.push_back({k, v});
    rec["scene"] = {{"at", node.scene->at.seconds},
                    {"source", node.scene->source_id},
                    {"attributes", std::move(attrs)}};
  }
  return rec;
}

void write_subtree(std::ostringstream& out, const TreeNode& node, NodeId parent) {
  out << node_record(node, parent).dump() << '\n';
  for (const auto& child : node.children) write_subtree(out, child, node.id);
}

TreeNode node_from_record(const ordered_json& rec) {
  TreeNode node;
  node.id = rec.at("id").get<NodeId>();
  node.level = rec.at("level").get<int>();
  const auto kind = node_kind_from_string(rec.at("kind").get<std::string>());
  if (!kind) throw FormatError("unknown node kind in record " + std::to_string(node.id));
  node.kind = *kind;
  node.span = {Timestamp{rec.at("start").get<std::int64_t>()},
               Timestamp{rec.at("end").get<std::int64_t>()}};
  node.expiration = Timestamp{rec.at("expiration").get<std::int64_t>()};
  node.never_expires = rec.value("never_expires", false);
  node.summary = rec.at("summary").get<std::string>();
  node.placeholder = rec.at("placeholder").get<bool>();
  node.short_summary = rec.value("short_summary", std::string{});
  if (rec.contains("scene")) {
    const auto& s = rec.at("scene");
    SceneInstant scene;
    scene.at = Timestamp{s.at("at").get<std::int64_t>()};
    scene.source_id = s.value("source", std::string{});
    for (const auto& kv : s.at("attributes")) {
      scene.attributes.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    }
    node.scene = std::move(scene);
  }
  return node;
}

}  // namespace

std::string serialize_tree(const HistoryTree& tree) {
  std::ostringstream out;
  out << kTreeFormatHeader << '\n';
  ordered_json meta;
  meta["version"] = tree.version;
  meta["max_depth"] = tree.max_depth;
  meta["next_id"] = tree.next_id;
  meta["root_summary"] = tree.root.summary;
  meta["root_start"] = tree.root.span.start.seconds;
  meta["root_end"] = tree.root.span.end.seconds;
  out << meta.dump() << '\n';
  for (const auto& child : tree.root.children) write_subtree(out, child, tree.root.id);
  return out.str();
}

HistoryTree parse_tree(std::string_view text) {
  std::istringstream in{std::string{text}};
  std::string line;
  if (!std::getline(in, line) || line != kTreeFormatHeader) {
    throw FormatError("missing emtree/1 header");
  }
  if (!std::getline(in, line)) throw FormatError("missing tree metadata line");

  HistoryTree tree;
  try {
    const auto meta = ordered_json::parse(line);
    tree = HistoryTree(meta.at("max_depth").get<int>());
    tree.version = meta.at("version").get<std::uint64_t>();
    tree.next_id = meta.at("next_id").get<NodeId>();
    tree.root.summary = meta.value("root_summary", std::string{});
    tree.root.span = {Timestamp{meta.value("root_start", std::int64_t{0})},
                      Timestamp{meta.value("root_end", std::int64_t{0})}};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string{"bad tree metadata: "} + e.what());
  }

  // Records arrive in pre-order, so every parent precedes its children and the
  // parent of a record is always on the current root-to-node path.
  std::vector<TreeNode*> path{&tree.root};
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TreeNode node;
    NodeId parent = 0;
    try {
      const auto rec = ordered_json::parse(line);
      node = node_from_record(rec);
      parent = rec.at("parent").get<NodeId>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
    while (!path.empty() && path.back()->id != parent) path.pop_back();
    if (path.empty()) {
      throw FormatError("line " + std::to_string(line_no) + ": parent " + std::to_string(parent) +
                        " not found");
    }
    auto& siblings = path.back()->children;
    siblings.push_back(std::move(node));
    path.push_back(&siblings.back());
  }
  return tree;
}

void write_tree_file(const HistoryTree& tree, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << serialize_tree(tree);
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

HistoryTree read_tree_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_tree(buf.str());
}

}  // namespace emtree
