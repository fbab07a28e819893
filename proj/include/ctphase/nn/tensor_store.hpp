#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctphase/common/jsonio.hpp"
#include "ctphase/nn/adam.hpp"

namespace ctphase {

// Checkpoint container: named f32 tensors plus a JSON metadata blob, written
// atomically (tmp + rename) and round-tripping bit-exactly.
class TensorStore {
 public:
  std::map<std::string, std::vector<float>> tensors;
  json meta;

  void save(const std::filesystem::path& path) const;
  static TensorStore load(const std::filesystem::path& path);

  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  const std::vector<float>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw LookupError("checkpoint tensor not found: " + name);
    }
    return it->second;
  }

  // Copies every parameter of a visit()-able model into the store.
  template <typename Model>
  void put_params(Model& model, const std::string& prefix) {
    model.visit(prefix, [&](const std::string& name, float* w, float* /*g*/,
                            Eigen::Index size) {
      tensors[name].assign(w, w + size);
    });
  }

  // Loads every parameter of a visit()-able model from the store; missing
  // names or size mismatches are integrity errors.
  template <typename Model>
  void fill_params(Model& model, const std::string& prefix) const {
    model.visit(prefix, [&](const std::string& name, float* w, float* /*g*/,
                            Eigen::Index size) {
      const auto& src = get(name);
      if (static_cast<Eigen::Index>(src.size()) != size) {
        throw IntegrityError("checkpoint tensor " + name + " has " +
                             std::to_string(src.size()) + " values, expected " +
                             std::to_string(size));
      }
      std::copy(src.begin(), src.end(), w);
    });
  }
};

}  // namespace ctphase
