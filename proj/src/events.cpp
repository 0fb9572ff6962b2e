#include "emtree/events.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "emtree/prompts.hpp"

namespace emtree {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::scene: return "scene";
    case EventKind::speech: return "speech";
    case EventKind::skill_start: return "skill-start";
    case EventKind::skill_end: return "skill-end";
    case EventKind::face: return "face";
  }
  return "scene";
}

std::optional<EventKind> event_kind_from_string(std::string_view text) {
  for (const auto k : {EventKind::scene, EventKind::speech, EventKind::skill_start, EventKind::skill_end,
                       EventKind::face}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

namespace {

const std::string* find_attr(const EventRecord& r, std::string_view key) {
  for (const auto& [k, v] : r.attributes) {
    if (k == key) return &v;
  }
  return nullptr;
}

void require(const EventRecord& r, std::string_view key) {
  const auto* v = find_attr(r, key);
  if (v == nullptr || trim(*v).empty()) {
    throw InvalidEvent(std::string{to_string(r.kind)} + " event needs a '" + std::string{key} + "' attribute");
  }
}

}  // namespace

void validate(const EventRecord& record) {
  switch (record.kind) {
    case EventKind::scene:
      if (record.attributes.empty()) throw InvalidEvent("scene event without attributes");
      break;
    case EventKind::speech: require(record, "text"); break;
    case EventKind::skill_start:
    case EventKind::skill_end: require(record, "skill"); break;
    case EventKind::face: require(record, "person"); break;
  }
}

EventRecord parse_event(std::string_view json_text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidEvent(std::string{"malformed event: "} + e.what());
  }
  if (!j.is_object()) throw InvalidEvent("event must be a JSON object");
  EventRecord r;
  const auto at = j.find("at");
  if (at == j.end() || !at->is_string()) throw InvalidEvent("event needs an 'at' timestamp");
  const auto ts = parse_timestamp(at->get<std::string>());
  if (!ts) throw InvalidEvent("unreadable timestamp '" + at->get<std::string>() + "'");
  r.at = *ts;
  const auto kind = j.value("kind", std::string{"scene"});
  const auto k = event_kind_from_string(kind);
  if (!k) throw InvalidEvent("unknown event kind '" + kind + "'");
  r.kind = *k;
  if (const auto attrs = j.find("attributes"); attrs != j.end()) {
    if (!attrs->is_object()) throw InvalidEvent("'attributes' must be an object");
    for (const auto& [key, value] : attrs->items()) {
      r.attributes.emplace_back(key, value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  r.source = j.value("source", std::string{});
  validate(r);
  return r;
}

std::string serialize_event(const EventRecord& record) {
  nlohmann::ordered_json j;
  j["at"] = format_timestamp(record.at);
  j["kind"] = std::string{to_string(record.kind)};
  j["attributes"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : record.attributes) j["attributes"][k] = v;
  if (!record.source.empty()) j["source"] = record.source;
  return j.dump();
}

std::vector<EventRecord> read_event_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<EventRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(parse_event(line));
    } catch (const InvalidEvent& e) {
      throw InvalidEvent(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_event_file(const std::vector<EventRecord>& events, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : events) out << serialize_event(e) << '\n';
}

SceneInstant to_scene(const EventRecord& record) {
  SceneInstant s;
  s.at = record.at;
  s.source_id = record.source;
  auto rest = [&](std::string_view skip) {
    for (const auto& kv : record.attributes) {
      if (kv.first != skip) s.attributes.push_back(kv);
    }
  };
  switch (record.kind) {
    case EventKind::scene:
      s.attributes = record.attributes;
      break;
    case EventKind::speech:
      s.attributes.emplace_back("speech", *find_attr(record, "text"));
      rest("text");
      break;
    case EventKind::skill_start:
      s.attributes.emplace_back("action", *find_attr(record, "skill"));
      rest("skill");
      break;
    case EventKind::skill_end:
      s.attributes.emplace_back("action", *find_attr(record, "skill") + " finished");
      rest("skill");
      break;
    case EventKind::face:
      s.attributes.emplace_back("action", "Saw(" + *find_attr(record, "person") + ")");
      rest("person");
      break;
  }
  return s;
}

}  // namespace emtree
