#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "ctphase/common/errors.hpp"
#include "ctphase/core/volume.hpp"

namespace ctphase {

struct OrganRecord {
  int organ_id = 0;
  double mean_hu = 0.0;
  int64_t voxel_count = 0;
  double volume_mm3 = 0.0;
};

// Per-organ intensity statistics over one volume.  Only organs that actually
// occupy voxels are recorded; records are ordered by organ_id.
struct OrganStats {
  std::vector<OrganRecord> records;
  int n_org = 0;

  const OrganRecord* find(int organ_id) const {
    for (const auto& r : records) {
      if (r.organ_id == organ_id) return &r;
    }
    return nullptr;
  }
};

// Mean HU over the voxels carrying organ_id.  Empty organs yield nullopt so
// downstream averages can skip them deterministically.  Accumulates in double
// regardless of the volume's scalar type.
template <typename S>
std::optional<double> mean_hu(const VolumeT<S>& volume,
                              const SegmentationMask& mask, int organ_id) {
  require_congruent(volume, mask);
  if (!mask.organ_table.count(organ_id)) {
    throw LookupError("organ id " + std::to_string(organ_id) +
                      " not present in organ table");
  }
  double sum = 0.0;
  int64_t count = 0;
  const auto n = volume.data.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<int>(mask.labels[i]) == organ_id) {
      sum += static_cast<double>(volume.data[i]);
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

// One pass over the grid, accumulating mean HU / voxel count / physical volume
// for every organ present in the mask.
template <typename S>
OrganStats compute_organ_stats(const VolumeT<S>& volume,
                               const SegmentationMask& mask) {
  require_congruent(volume, mask);
  std::map<int, std::pair<double, int64_t>> acc;  // organ_id -> (sum, count)
  const auto n = volume.data.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& [sum, count] = acc[static_cast<int>(mask.labels[i])];
    sum += static_cast<double>(volume.data[i]);
    ++count;
  }
  OrganStats stats;
  const double voxel_mm3 = volume.spacing_mm.voxel_mm3();
  for (const auto& [organ_id, sc] : acc) {
    if (sc.second == 0) continue;
    OrganRecord rec;
    rec.organ_id = organ_id;
    rec.mean_hu = sc.first / static_cast<double>(sc.second);
    rec.voxel_count = sc.second;
    rec.volume_mm3 = static_cast<double>(sc.second) * voxel_mm3;
    stats.records.push_back(rec);
  }
  stats.n_org = static_cast<int>(stats.records.size());
  return stats;
}

}  // namespace ctphase
