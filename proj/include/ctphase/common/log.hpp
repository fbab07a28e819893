#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace ctphase::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3 };

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("SMILE_LOG_LEVEL");
    if (!env) return Level::Info;
    std::string s(env);
    if (s == "debug") return Level::Debug;
    if (s == "info") return Level::Info;
    if (s == "warn") return Level::Warn;
    if (s == "error") return Level::Error;
    return Level::Info;
  }();
  return level;
}

template <typename... Args>
void emit(Level level, const char* tag, const char* fmt, Args... args) {
  if (level < threshold()) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

template <typename... Args>
void debug(const char* fmt, Args... args) {
  emit(Level::Debug, "debug", fmt, args...);
}
template <typename... Args>
void info(const char* fmt, Args... args) {
  emit(Level::Info, "info", fmt, args...);
}
template <typename... Args>
void warn(const char* fmt, Args... args) {
  emit(Level::Warn, "warn", fmt, args...);
}
template <typename... Args>
void error(const char* fmt, Args... args) {
  emit(Level::Error, "error", fmt, args...);
}

}  // namespace ctphase::log
