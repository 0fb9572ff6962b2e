#include "emtree/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace emtree {

std::shared_ptr<spdlog::logger> logger() {
  static const std::shared_ptr<spdlog::logger> instance = [] {
    auto existing = spdlog::get("emtree");
    if (existing) return existing;
    auto created = spdlog::stderr_color_mt("emtree");
    created->set_level(spdlog::level::warn);
    return created;
  }();
  return instance;
}

}  // namespace emtree
