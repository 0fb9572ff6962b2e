#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "emtree/memory_tree.hpp"

namespace emtree {

enum class EventKind { scene, speech, skill_start, skill_end, face };

std::string_view to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(std::string_view text);

struct EventRecord {
  Timestamp at;
  EventKind kind = EventKind::scene;
  AttributeList attributes;
  std::string source;

  bool operator==(const EventRecord&) const = default;
};

class InvalidEvent : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Throws InvalidEvent when kind-specific attributes are missing
// (speech: text, skill-start/skill-end: skill, face: person, scene: anything).
void validate(const EventRecord& record);

// {"at": "...", "kind": "scene", "attributes": {"action": "...", ...}, "source": "..."}
// Attribute order is kept.
EventRecord parse_event(std::string_view json_text);
std::string serialize_event(const EventRecord& record);

std::vector<EventRecord> read_event_file(const std::filesystem::path& path);
void write_event_file(const std::vector<EventRecord>& events, const std::filesystem::path& path);

// Scene instant the builder sees for one record.
SceneInstant to_scene(const EventRecord& record);

}  // namespace emtree
