#include "ctphase/common/jsonio.hpp"

#include <fstream>

namespace ctphase {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open JSON file: " + path.string());
  }
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) {
    throw FormatError("malformed JSON in " + path.string());
  }
  return j;
}

void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << j.dump(2) << "\n";
  if (!out) {
    throw DataError("write failed: " + path.string());
  }
}

}  // namespace ctphase
