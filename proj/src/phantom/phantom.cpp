#include "ctphase/phantom/phantom.hpp"

#include <cmath>
#include <numbers>

namespace ctphase {
namespace {

constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

std::map<Phase, double> uptake(double a, double v, double d) {
  return {{Phase::N, 0.0}, {Phase::A, a}, {Phase::V, v}, {Phase::D, d}};
}

std::map<Phase, double> flat_uptake() { return uptake(0.0, 0.0, 0.0); }

// True when the voxel center (z, y, x) falls inside the rotated ellipsoid.
bool inside_ellipsoid(const EllipsoidShape& e, double z, double y, double x) {
  const double dz = z - e.center_vox[0];
  double dy = y - e.center_vox[1];
  double dx = x - e.center_vox[2];
  if (e.rotation_deg != 0.0) {
    const double c = std::cos(deg2rad(e.rotation_deg));
    const double s = std::sin(deg2rad(e.rotation_deg));
    const double ry = c * dy + s * dx;
    const double rx = -s * dy + c * dx;
    dy = ry;
    dx = rx;
  }
  const double nz = dz / e.radii_vox[0];
  const double ny = dy / e.radii_vox[1];
  const double nx = dx / e.radii_vox[2];
  return nz * nz + ny * ny + nx * nx <= 1.0;
}

void require_inside_grid(const std::string& name,
                         const std::array<double, 3>& center,
                         const std::array<double, 3>& extent,
                         const GridDims& dims) {
  const double hi[3] = {static_cast<double>(dims.z - 1),
                        static_cast<double>(dims.y - 1),
                        static_cast<double>(dims.x - 1)};
  for (int a = 0; a < 3; ++a) {
    if (center[a] - extent[a] < 0.0 || center[a] + extent[a] > hi[a]) {
      throw ConfigError("phantom shape \"" + name +
                        "\" extends outside the grid on axis " +
                        std::to_string(a));
    }
  }
}

}  // namespace

std::vector<OrganSpec> default_uptake_table() {
  std::vector<OrganSpec> organs;
  // Soft-tissue body envelope; flat across phases.
  organs.push_back({1, "body", OrganCategory::organ,
                    {{8, 32, 32}, {6.9, 26, 30}, 0.0}, 40.0, flat_uptake()});
  // Parenchymal organs peak in the venous phase.
  organs.push_back({2, "liver", OrganCategory::organ,
                    {{8, 22, 20}, {5.2, 9, 13}, 0.0}, 55.0,
                    uptake(25.0, 60.0, 35.0)});
  organs.push_back({3, "spleen", OrganCategory::organ,
                    {{8, 21, 48}, {4, 7, 7}, 10.0}, 50.0,
                    uptake(45.0, 65.0, 30.0)});
  organs.push_back({4, "pancreas", OrganCategory::organ,
                    {{8, 36, 33}, {3, 4, 12}, 20.0}, 45.0,
                    uptake(40.0, 55.0, 25.0)});
  // Kidneys keep climbing into the delay phase (excreted contrast).
  organs.push_back({5, "kidney_l", OrganCategory::organ,
                    {{9, 47, 44}, {3.5, 5.5, 6}, 0.0}, 38.0,
                    uptake(60.0, 90.0, 120.0)});
  organs.push_back({6, "kidney_r", OrganCategory::organ,
                    {{9, 47, 20}, {3.5, 5.5, 6}, 0.0}, 38.0,
                    uptake(60.0, 90.0, 120.0)});
  // Aorta flashes brightest in the arterial phase, then washes out.
  organs.push_back({7, "aorta", OrganCategory::vessel,
                    {{8, 43, 30}, {7, 3, 3}, 0.0}, 45.0,
                    uptake(250.0, 120.0, 60.0)});
  // Air and bone are contrast-inert by construction.
  organs.push_back({8, "bowel_gas", OrganCategory::air,
                    {{7, 36, 52}, {2.5, 3.5, 4}, 0.0}, -1000.0,
                    flat_uptake()});
  organs.push_back({9, "vertebra", OrganCategory::bone,
                    {{8, 52, 32}, {6.9, 4.5, 4.5}, 0.0}, 500.0,
                    flat_uptake()});
  return organs;
}

std::vector<TumorSpec> default_tumors() {
  return {
      {10, "liver_tumor", 2, {8, 24, 15}, 3.5, -40.0},
      {11, "pancreas_tumor", 4, {8, 36, 38}, 2.2, -35.0},
  };
}

PhantomSpec default_phantom_spec(uint64_t seed, const std::string& patient_id) {
  PhantomSpec spec;
  spec.seed = seed;
  spec.patient_id = patient_id;
  spec.organs = default_uptake_table();
  spec.tumors = default_tumors();
  return spec;
}

void validate_spec(const PhantomSpec& spec) {
  if (spec.dims.z < 8 || spec.dims.y < 8 || spec.dims.x < 8) {
    throw ConfigError("phantom grid dimensions must each be >= 8");
  }
  if (spec.noise_std < 0.0) {
    throw ConfigError("noise_std must be nonnegative");
  }
  if (spec.uptake_jitter < 0.0 || spec.uptake_jitter >= 1.0) {
    throw ConfigError("uptake_jitter must lie in [0, 1)");
  }
  std::map<int, const OrganSpec*> by_id;
  for (const auto& org : spec.organs) {
    if (org.organ_id <= 0) {
      throw ConfigError("organ ids must be positive (0 is background)");
    }
    if (!by_id.emplace(org.organ_id, &org).second) {
      throw ConfigError("duplicate organ id " + std::to_string(org.organ_id));
    }
    // Every phase must be present, with N as the zero baseline.
    for (Phase p : kAllPhases) {
      if (!org.uptake.count(p)) {
        throw ConfigError("organ \"" + org.name + "\" missing uptake for phase " +
                          phase_to_string(p));
      }
    }
    if (org.uptake.at(Phase::N) != 0.0) {
      throw ConfigError("organ \"" + org.name + "\" must have uptake[N] = 0");
    }
    const bool inert = org.category == OrganCategory::air ||
                       org.category == OrganCategory::bone;
    if (inert) {
      for (Phase p : kAllPhases) {
        if (org.uptake.at(p) != 0.0) {
          throw ConfigError("air/bone organ \"" + org.name +
                            "\" must have zero uptake in all phases");
        }
      }
      if (org.category == OrganCategory::air && org.base_hu != -1000.0) {
        throw ConfigError("air organ \"" + org.name + "\" must use base -1000 HU");
      }
      if (org.category == OrganCategory::bone && org.base_hu < 300.0) {
        throw ConfigError("bone organ \"" + org.name + "\" must use base >= +300 HU");
      }
    }
    // Conservative in-plane bound: a rotated ellipsoid fits inside the disk
    // of its larger in-plane radius.
    const double rp = std::max(org.shape.radii_vox[1], org.shape.radii_vox[2]);
    require_inside_grid(org.name, org.shape.center_vox,
                        {org.shape.radii_vox[0], rp, rp}, spec.dims);
  }
  for (const auto& tum : spec.tumors) {
    if (by_id.count(tum.organ_id) || tum.organ_id <= 0) {
      throw ConfigError("tumor id " + std::to_string(tum.organ_id) +
                        " collides with an organ id or is not positive");
    }
    if (!by_id.count(tum.host_organ_id)) {
      throw ConfigError("tumor \"" + tum.name + "\" references unknown host organ " +
                        std::to_string(tum.host_organ_id));
    }
    require_inside_grid(tum.name, tum.center_vox,
                        {tum.radius_vox, tum.radius_vox, tum.radius_vox},
                        spec.dims);
  }
}

PhantomResult generate_phantom(const PhantomSpec& spec) {
  validate_spec(spec);
  const GridDims dims = spec.dims;
  const auto count = dims.count();

  // Paint labels once; organs later in the list overwrite earlier ones.
  SegmentationMask base_mask;
  base_mask.dims = dims;
  base_mask.spacing_mm = spec.spacing_mm;
  base_mask.labels =
      Eigen::Array<uint16_t, Eigen::Dynamic, 1>::Zero(count);
  base_mask.organ_table[0] = {"background", OrganCategory::background};

  for (const auto& org : spec.organs) {
    base_mask.organ_table[org.organ_id] = {org.name, org.category};
    for (Eigen::Index z = 0; z < dims.z; ++z) {
      for (Eigen::Index y = 0; y < dims.y; ++y) {
        for (Eigen::Index x = 0; x < dims.x; ++x) {
          if (inside_ellipsoid(org.shape, static_cast<double>(z),
                               static_cast<double>(y),
                               static_cast<double>(x))) {
            base_mask.at(z, y, x) = static_cast<uint16_t>(org.organ_id);
          }
        }
      }
    }
  }
  // Lesions replace host voxels only: a tumor never leaks outside its organ.
  for (const auto& tum : spec.tumors) {
    base_mask.organ_table[tum.organ_id] = {tum.name, OrganCategory::lesion};
    const double r2 = tum.radius_vox * tum.radius_vox;
    for (Eigen::Index z = 0; z < dims.z; ++z) {
      for (Eigen::Index y = 0; y < dims.y; ++y) {
        for (Eigen::Index x = 0; x < dims.x; ++x) {
          if (base_mask.at(z, y, x) != tum.host_organ_id) continue;
          const double dz = static_cast<double>(z) - tum.center_vox[0];
          const double dy = static_cast<double>(y) - tum.center_vox[1];
          const double dx = static_cast<double>(x) - tum.center_vox[2];
          if (dz * dz + dy * dy + dx * dx <= r2) {
            base_mask.at(z, y, x) = static_cast<uint16_t>(tum.organ_id);
          }
        }
      }
    }
  }

  // Realize per-patient uptake: one multiplicative factor per organ keeps the
  // phase ordering intact while varying magnitude across patients.
  PhantomResult result;
  Rng jitter_rng =
      stream_rng(spec.seed, "uptake-jitter/" + spec.patient_id);
  result.expected_hu[0] = {-1000.0, -1000.0, -1000.0, -1000.0};
  for (const auto& org : spec.organs) {
    const double f =
        1.0 + spec.uptake_jitter * (2.0 * jitter_rng.uniform() - 1.0);
    auto& row = result.expected_hu[org.organ_id];
    for (Phase p : kAllPhases) {
      row[static_cast<int>(p)] = org.base_hu + f * org.uptake.at(p);
    }
  }
  for (const auto& tum : spec.tumors) {
    const auto& host = result.expected_hu.at(tum.host_organ_id);
    auto& row = result.expected_hu[tum.organ_id];
    for (Phase p : kAllPhases) {
      const bool contrast_phase = p == Phase::A || p == Phase::V;
      row[static_cast<int>(p)] =
          host[static_cast<int>(p)] + (contrast_phase ? tum.hu_offset : 0.0);
    }
  }

  // Highest label id bounds the lookup table.
  int max_label = 0;
  for (const auto& [id, _] : result.expected_hu) max_label = std::max(max_label, id);

  for (Phase p : kAllPhases) {
    std::vector<double> lut(static_cast<size_t>(max_label) + 1, -1000.0);
    for (const auto& [id, row] : result.expected_hu) {
      lut[static_cast<size_t>(id)] = row[static_cast<int>(p)];
    }

    Volume vol;
    vol.dims = dims;
    vol.spacing_mm = spec.spacing_mm;
    vol.phase = p;
    vol.patient_id = spec.patient_id;
    vol.data.resize(count);
    for (Eigen::Index i = 0; i < count; ++i) {
      vol.data[i] = static_cast<float>(lut[base_mask.labels[i]]);
    }

    SegmentationMask mask = base_mask;
    if (spec.misalign.enabled) {
      Rng mis_rng = stream_rng(spec.seed, "misalign/" + spec.patient_id + "/" +
                                              phase_to_string(p));
      const RigidTransform tf = draw_transform(spec.misalign, mis_rng);
      std::tie(vol, mask) = apply_misalignment(vol, mask, spec.misalign, tf);
    }
    if (spec.noise_std > 0.0) {
      Rng noise_rng = stream_rng(spec.seed, "noise/" + spec.patient_id + "/" +
                                                phase_to_string(p));
      for (Eigen::Index i = 0; i < count; ++i) {
        vol.data[i] += static_cast<float>(spec.noise_std * noise_rng.normal());
      }
    }
    vol.clamp_to_hu_range();
    result.volumes.emplace(p, std::move(vol));
    result.masks.emplace(p, std::move(mask));
  }
  return result;
}

RigidTransform draw_transform(const MisalignParams& params, Rng& rng) {
  RigidTransform tf;
  for (int a = 0; a < 3; ++a) {
    tf.translation_mm[a] =
        rng.uniform(-params.max_translation_mm, params.max_translation_mm);
  }
  tf.rotation_deg =
      rng.uniform(-params.max_rotation_deg, params.max_rotation_deg);
  return tf;
}

std::pair<Volume, SegmentationMask> apply_misalignment(
    const Volume& volume, const SegmentationMask& mask,
    const MisalignParams& params, const RigidTransform& transform) {
  require_congruent(volume, mask);
  for (int a = 0; a < 3; ++a) {
    if (std::abs(transform.translation_mm[a]) >
        params.max_translation_mm + 1e-12) {
      throw ConfigError("misalignment translation exceeds configured bound");
    }
  }
  if (std::abs(transform.rotation_deg) > params.max_rotation_deg + 1e-12) {
    throw ConfigError("misalignment rotation exceeds configured bound");
  }

  const GridDims dims = volume.dims;
  const GridSpacing sp = volume.spacing_mm;
  const double cz = 0.5 * static_cast<double>(dims.z - 1) * sp.z;
  const double cy = 0.5 * static_cast<double>(dims.y - 1) * sp.y;
  const double cx = 0.5 * static_cast<double>(dims.x - 1) * sp.x;
  const double cosr = std::cos(deg2rad(transform.rotation_deg));
  const double sinr = std::sin(deg2rad(transform.rotation_deg));

  Volume out_vol = volume;
  SegmentationMask out_mask = mask;

  for (Eigen::Index z = 0; z < dims.z; ++z) {
    for (Eigen::Index y = 0; y < dims.y; ++y) {
      for (Eigen::Index x = 0; x < dims.x; ++x) {
        // Inverse map: where in the input does this output voxel come from?
        const double oz = static_cast<double>(z) * sp.z - transform.translation_mm[0] - cz;
        const double oy = static_cast<double>(y) * sp.y - transform.translation_mm[1] - cy;
        const double ox = static_cast<double>(x) * sp.x - transform.translation_mm[2] - cx;
        // Undo the rotation about z (rotation acts on the (y, x) plane).
        const double py = cosr * oy - sinr * ox + cy;
        const double px = sinr * oy + cosr * ox + cx;
        const double pz = oz + cz;
        // Back to voxel units.
        const double vz = pz / sp.z;
        const double vy = py / sp.y;
        const double vx = px / sp.x;

        const Eigen::Index o = out_vol.index(z, y, x);
        const bool in_field =
            vz >= 0.0 && vz <= static_cast<double>(dims.z - 1) &&
            vy >= 0.0 && vy <= static_cast<double>(dims.y - 1) &&
            vx >= 0.0 && vx <= static_cast<double>(dims.x - 1);
        if (!in_field) {
          out_vol.data[o] = -1000.0f;
          out_mask.labels[o] = 0;
          continue;
        }

        // Trilinear HU interpolation.
        const auto z0 = static_cast<Eigen::Index>(std::floor(vz));
        const auto y0 = static_cast<Eigen::Index>(std::floor(vy));
        const auto x0 = static_cast<Eigen::Index>(std::floor(vx));
        const Eigen::Index z1 = std::min(z0 + 1, dims.z - 1);
        const Eigen::Index y1 = std::min(y0 + 1, dims.y - 1);
        const Eigen::Index x1 = std::min(x0 + 1, dims.x - 1);
        const double fz = vz - static_cast<double>(z0);
        const double fy = vy - static_cast<double>(y0);
        const double fx = vx - static_cast<double>(x0);
        auto v = [&](Eigen::Index zz, Eigen::Index yy, Eigen::Index xx) {
          return static_cast<double>(volume.at(zz, yy, xx));
        };
        const double c00 = v(z0, y0, x0) * (1 - fx) + v(z0, y0, x1) * fx;
        const double c01 = v(z0, y1, x0) * (1 - fx) + v(z0, y1, x1) * fx;
        const double c10 = v(z1, y0, x0) * (1 - fx) + v(z1, y0, x1) * fx;
        const double c11 = v(z1, y1, x0) * (1 - fx) + v(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out_vol.data[o] = static_cast<float>(c0 * (1 - fz) + c1 * fz);

        // Nearest-neighbor labels.
        const auto nz = static_cast<Eigen::Index>(std::lround(vz));
        const auto ny = static_cast<Eigen::Index>(std::lround(vy));
        const auto nx = static_cast<Eigen::Index>(std::lround(vx));
        out_mask.labels[o] = mask.at(nz, ny, nx);
      }
    }
  }
  return {std::move(out_vol), std::move(out_mask)};
}

std::pair<Volume, SegmentationMask> apply_misalignment(
    const Volume& volume, const SegmentationMask& mask,
    const MisalignParams& params, uint64_t seed) {
  Rng rng(seed);
  return apply_misalignment(volume, mask, params, draw_transform(params, rng));
}

}  // namespace ctphase
