#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

namespace spn::log {

enum class Level { error = 0, info = 1, debug = 2 };

// Level comes from SPN_LOG={error,info,debug}; default info.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("SPN_LOG");
    if (env == nullptr) return Level::info;
    const std::string v(env);
    if (v == "error") return Level::error;
    if (v == "debug") return Level::debug;
    return Level::info;
  }();
  return level;
}

inline void write(Level level, const std::string& msg) {
  if (level > threshold()) return;
  const char* tag = level == Level::error ? "error" : level == Level::info ? "info" : "debug";
  std::cerr << "[spn " << tag << "] " << msg << "\n";
}

inline void error(const std::string& msg) { write(Level::error, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace spn::log
