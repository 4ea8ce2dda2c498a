#pragma once

#include <sstream>
#include <string>

namespace promise::log {

// spdlog sink, compiled without the libtorch include tree.
void write_info(const std::string &msg);
void write_warn(const std::string &msg);
void write_error(const std::string &msg);
void set_quiet(bool quiet);

template <typename... Args>
std::string concat(const Args &...args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

template <typename... Args>
void info(const Args &...args) { write_info(concat(args...)); }
template <typename... Args>
void warn(const Args &...args) { write_warn(concat(args...)); }
template <typename... Args>
void error(const Args &...args) { write_error(concat(args...)); }

} // namespace promise::log
