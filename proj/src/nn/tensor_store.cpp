#include "ctphase/nn/tensor_store.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace ctphase {
namespace {

constexpr char kMagic[8] = {'C', 'T', 'P', 'S', 'T', 'O', 'R', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("checkpoint truncated reading ") + what);
  return v;
}

}  // namespace

void TensorStore::save(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp);
    out.write(kMagic, sizeof(kMagic));
    const std::string meta_str = meta.dump();
    write_pod<uint64_t>(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, data] : tensors) {
      write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod<uint64_t>(out, data.size());
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TensorStore TensorStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  TensorStore store;
  const auto meta_len = read_pod<uint64_t>(in, "metadata length");
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw FormatError("checkpoint truncated reading metadata");
  store.meta = json::parse(meta_str, nullptr, /*allow_exceptions=*/false);
  if (store.meta.is_discarded()) {
    throw FormatError("checkpoint metadata is not valid JSON");
  }
  const auto n_tensors = read_pod<uint32_t>(in, "tensor count");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const auto name_len = read_pod<uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto count = read_pod<uint64_t>(in, "value count");
    std::vector<float> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) {
      throw IntegrityError("checkpoint truncated in tensor " + name);
    }
    store.tensors.emplace(std::move(name), std::move(data));
  }
  return store;
}

}  // namespace ctphase
