#include "promise/log.hpp"

#include <spdlog/spdlog.h>

namespace promise::log {

void write_info(const std::string &msg) { spdlog::info("{}", msg); }
void write_warn(const std::string &msg) { spdlog::warn("{}", msg); }
void write_error(const std::string &msg) { spdlog::error("{}", msg); }
void set_quiet(bool quiet) { spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info); }

} // namespace promise::log
