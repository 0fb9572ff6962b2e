#pragma once

#include <memory>

#include <spdlog/logger.h>

namespace emtree {

// Library-wide logger ("emtree"). Tests may attach extra sinks to it.
std::shared_ptr<spdlog::logger> logger();

}  // namespace emtree
