#pragma once

// Line-delimited JSON logging to stderr.

#include <string>

#include <nlohmann/json.hpp>

namespace mmpda::cli {

// Colors the level field on a terminal unless NO_COLOR is set.
void init_logging();

void log_info(const std::string& event, const nlohmann::json& fields = {});
void log_warn(const std::string& event, const nlohmann::json& fields = {});
void log_error(const std::string& event, const nlohmann::json& fields = {});

}  // namespace mmpda::cli
