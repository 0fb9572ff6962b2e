#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "emtree/builder.hpp"
#include "emtree/harness.hpp"
#include "emtree/service.hpp"

namespace emtree {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Keys not present keep their defaults. Lifetimes are given in minutes:
// {"max_depth": 8, "lifetimes_minutes": [15, 60, 1440, 1440], "cluster_gap_factor": 10, ...}
BuilderConfig builder_config_from_json(const nlohmann::json& j);
// {"builder": {...}, "batch_cap": 64, "forgetting": true, "relevance": true, "nightly_hour": 3, ...}
ServiceConfig service_config_from_json(const nlohmann::json& j);

// {"endpoint": ..., "model": ..., "timeout_seconds": 60, "max_retries": 3}; the EMTREE_LM_*
// environment variables override the file when set.
HttpBackendConfig http_config_from_json(const nlohmann::json& j);

struct EvalSpec {
  HarnessConfig harness;
  std::vector<std::string> variants;  // empty: all standard variants
  std::vector<std::uint64_t> seeds;
  std::vector<std::filesystem::path> episode_files;  // external episodes instead of the generator
  unsigned threads = 1;
  std::filesystem::path report;   // empty: stdout
  std::filesystem::path details;  // empty: not written
};

// {"seeds": [1, 2] | "seed_count": 20, "variants": ["A", "F"], "episodes": 5, "qa_pairs": 2, ...}
EvalSpec eval_spec_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace emtree
