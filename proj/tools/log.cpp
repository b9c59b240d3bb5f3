#include "log.hpp"

#include <cstdlib>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace mmpda::cli {

namespace {

std::shared_ptr<spdlog::logger>& logger() {
  static std::shared_ptr<spdlog::logger> instance;
  return instance;
}

// The message carries the remaining members of the JSON object, so the line
// stays a single valid object.
std::string body(const std::string& event, const nlohmann::json& fields) {
  nlohmann::ordered_json obj;
  obj["event"] = event;
  if (fields.is_object()) {
    for (const auto& [k, v] : fields.items()) obj[k] = v;
  }
  const std::string text = obj.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  return text.substr(1, text.size() - 2);  // strip the braces
}

void emit(spdlog::level::level_enum level, const std::string& event,
          const nlohmann::json& fields) {
  if (!logger()) init_logging();
  logger()->log(level, "{}", body(event, fields));
}

}  // namespace

void init_logging() {
  const char* no_color = std::getenv("NO_COLOR");
  const auto mode = (no_color != nullptr && no_color[0] != '\0')
                        ? spdlog::color_mode::never
                        : spdlog::color_mode::automatic;
  auto sink = std::make_shared<spdlog::sinks::stderr_color_sink_mt>(mode);
  auto l = std::make_shared<spdlog::logger>("mmpda", sink);
  l->set_pattern(R"({"ts":"%Y-%m-%dT%H:%M:%S.%eZ","level":"%^%l%$",%v})",
                 spdlog::pattern_time_type::utc);
  l->set_level(spdlog::level::info);
  logger() = std::move(l);
}

void log_info(const std::string& event, const nlohmann::json& fields) {
  emit(spdlog::level::info, event, fields);
}
void log_warn(const std::string& event, const nlohmann::json& fields) {
  emit(spdlog::level::warn, event, fields);
}
void log_error(const std::string& event, const nlohmann::json& fields) {
  emit(spdlog::level::err, event, fields);
}

}  // namespace mmpda::cli
