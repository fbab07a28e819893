#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ctphase/common/errors.hpp"
#include "ctphase/core/phase.hpp"

namespace ctphase {

// Conventional 12-bit CT intensity range.  Every stored volume is clamped to
// this range on load.
inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 3071.0;

template <typename S>
constexpr S clamp_hu(S v) {
  return v < static_cast<S>(kHuMin)   ? static_cast<S>(kHuMin)
         : v > static_cast<S>(kHuMax) ? static_cast<S>(kHuMax)
                                      : v;
}

// Grid dimensions, slowest-varying first (z, y, x).
struct GridDims {
  Eigen::Index z = 0, y = 0, x = 0;

  Eigen::Index count() const { return z * y * x; }
  bool operator==(const GridDims&) const = default;
};

// Physical voxel spacing in millimeters per axis (z, y, x order).
struct GridSpacing {
  double z = 1.0, y = 1.0, x = 1.0;

  double voxel_mm3() const { return z * y * x; }
};

// Spacings match when every component agrees within relative tolerance 1e-6.
inline bool spacing_close(const GridSpacing& a, const GridSpacing& b) {
  auto close = [](double u, double v) {
    return std::abs(u - v) <= 1e-6 * std::max(std::abs(u), std::abs(v));
  };
  return close(a.z, b.z) && close(a.y, b.y) && close(a.x, b.x);
}

inline bool congruent(const GridDims& da, const GridSpacing& sa,
                      const GridDims& db, const GridSpacing& sb) {
  return da == db && spacing_close(sa, sb);
}

// Dense HU grid for one patient/phase.  Data is stored flat in C order
// (z slowest): index = (z*Y + y)*X + x.
template <typename S>
struct VolumeT {
  Eigen::Array<S, Eigen::Dynamic, 1> data;
  GridDims dims;
  GridSpacing spacing_mm;
  Phase phase = Phase::N;
  std::string patient_id;

  Eigen::Index index(Eigen::Index z, Eigen::Index y, Eigen::Index x) const {
    return (z * dims.y + y) * dims.x + x;
  }
  S& at(Eigen::Index z, Eigen::Index y, Eigen::Index x) {
    return data[index(z, y, x)];
  }
  S at(Eigen::Index z, Eigen::Index y, Eigen::Index x) const {
    return data[index(z, y, x)];
  }

  // Checks the structural invariants: positive spacing, per-axis size >= 8,
  // data length matching dims.
  void validate() const {
    if (spacing_mm.z <= 0 || spacing_mm.y <= 0 || spacing_mm.x <= 0) {
      throw ShapeError("volume spacing must be strictly positive");
    }
    if (dims.z < 8 || dims.y < 8 || dims.x < 8) {
      throw ShapeError("volume dimensions must each be >= 8");
    }
    if (data.size() != dims.count()) {
      throw ShapeError("volume data length does not match dims");
    }
  }

  void clamp_to_hu_range() { data = data.min(static_cast<S>(kHuMax)).max(static_cast<S>(kHuMin)); }
};

using Volume = VolumeT<float>;

// Anatomical category of a labeled structure.
enum class OrganCategory { background, organ, vessel, bone, air, lesion };

inline std::string category_to_string(OrganCategory c) {
  switch (c) {
    case OrganCategory::background: return "background";
    case OrganCategory::organ: return "organ";
    case OrganCategory::vessel: return "vessel";
    case OrganCategory::bone: return "bone";
    case OrganCategory::air: return "air";
    case OrganCategory::lesion: return "lesion";
  }
  throw LookupError("invalid organ category enum value");
}

inline OrganCategory category_from_string(std::string_view s) {
  if (s == "background") return OrganCategory::background;
  if (s == "organ") return OrganCategory::organ;
  if (s == "vessel") return OrganCategory::vessel;
  if (s == "bone") return OrganCategory::bone;
  if (s == "air") return OrganCategory::air;
  if (s == "lesion") return OrganCategory::lesion;
  throw FormatError("unknown organ category \"" + std::string(s) + "\"");
}

struct OrganInfo {
  std::string name;
  OrganCategory category = OrganCategory::organ;

  bool operator==(const OrganInfo&) const = default;
};

// Per-voxel integer labels over a grid congruent with some Volume, plus the
// table describing each label.  Label 0 is reserved for background.
struct SegmentationMask {
  Eigen::Array<uint16_t, Eigen::Dynamic, 1> labels;
  GridDims dims;
  GridSpacing spacing_mm;
  std::map<int, OrganInfo> organ_table;

  Eigen::Index index(Eigen::Index z, Eigen::Index y, Eigen::Index x) const {
    return (z * dims.y + y) * dims.x + x;
  }
  uint16_t& at(Eigen::Index z, Eigen::Index y, Eigen::Index x) {
    return labels[index(z, y, x)];
  }
  uint16_t at(Eigen::Index z, Eigen::Index y, Eigen::Index x) const {
    return labels[index(z, y, x)];
  }

  // Every label value present in the grid must appear in organ_table.
  void validate() const {
    if (labels.size() != dims.count()) {
      throw ShapeError("mask label grid length does not match dims");
    }
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
      if (!organ_table.count(static_cast<int>(labels[i]))) {
        throw IntegrityError("mask contains label " +
                             std::to_string(labels[i]) +
                             " absent from the organ table");
      }
    }
  }
};

template <typename S>
void require_congruent(const VolumeT<S>& v, const SegmentationMask& m) {
  if (!congruent(v.dims, v.spacing_mm, m.dims, m.spacing_mm)) {
    throw ShapeError("volume and mask grids are not congruent");
  }
}

}  // namespace ctphase
