#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "ctphase/common/errors.hpp"

namespace ctphase {

using json = nlohmann::json;

// Reads and parses a JSON file.  Missing file or malformed content raises a
// format error naming the path.
json read_json_file(const std::filesystem::path& path);

// Writes JSON with sorted keys and a trailing newline (byte-deterministic for
// identical content).
void write_json_file(const json& j, const std::filesystem::path& path);

// Field access that reports *which* field is missing.
inline const json& require_field(const json& j, const std::string& key,
                                 const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw FormatError(where + ": missing field \"" + key + "\"");
  }
  return *it;
}

}  // namespace ctphase
