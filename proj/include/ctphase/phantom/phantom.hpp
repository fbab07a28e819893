#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctphase/common/rng.hpp"
#include "ctphase/core/stats.hpp"
#include "ctphase/core/volume.hpp"

namespace ctphase {

// Axis-aligned ellipsoid with an optional in-plane rotation, in voxel units
// (z, y, x order).  Rotation is about the z axis, applied to the (y, x)
// offsets before the ellipsoid test.
struct EllipsoidShape {
  std::array<double, 3> center_vox{};
  std::array<double, 3> radii_vox{};
  double rotation_deg = 0.0;
};

struct OrganSpec {
  int organ_id = 0;
  std::string name;
  OrganCategory category = OrganCategory::organ;
  EllipsoidShape shape;
  double base_hu = 0.0;
  // HU delta per phase; must define all four phases with uptake[N] = 0.
  std::map<Phase, double> uptake;
};

// Spherical lesion painted inside a host organ.  The HU offset (negative =
// hypo-enhancing) applies in the contrast-bearing phases A and V; in N and D
// the lesion matches its host.
struct TumorSpec {
  int organ_id = 0;  // label id of the lesion itself
  std::string name;
  int host_organ_id = 0;
  std::array<double, 3> center_vox{};
  double radius_vox = 0.0;
  double hu_offset = 0.0;
};

struct MisalignParams {
  bool enabled = false;
  double max_translation_mm = 2.0;
  double max_rotation_deg = 5.0;
};

// Rigid in-plane rotation about the grid center plus 3D translation, in
// physical millimeters.
struct RigidTransform {
  std::array<double, 3> translation_mm{};  // z, y, x
  double rotation_deg = 0.0;               // about the z axis
};

// Procedural description of one synthetic patient: organ geometry, contrast
// uptake per phase, lesions, acquisition noise, and inter-phase misalignment.
struct PhantomSpec {
  uint64_t seed = 0;
  std::string patient_id = "p000";
  GridDims dims{16, 64, 64};
  GridSpacing spacing_mm{2.5, 1.0, 1.0};
  std::vector<OrganSpec> organs;
  std::vector<TumorSpec> tumors;
  double noise_std = 10.0;
  // Per-patient multiplicative spread applied to each organ's uptake curve.
  double uptake_jitter = 0.10;
  MisalignParams misalign;
};

struct PhantomResult {
  std::map<Phase, Volume> volumes;
  std::map<Phase, SegmentationMask> masks;
  // Realized noise-free mean HU per label per phase (after uptake jitter,
  // before noise); the analytic ground truth for uptake-fidelity checks.
  std::map<int, std::array<double, kNumPhases>> expected_hu;
};

// Canonical phantom physiology: aorta peaks in A; liver/pancreas/spleen peak
// in V; kidneys peak in D; air/bone flat across phases.
std::vector<OrganSpec> default_uptake_table();
std::vector<TumorSpec> default_tumors();

// Assembles a complete default spec for one patient.
PhantomSpec default_phantom_spec(uint64_t seed, const std::string& patient_id);

// Validates spec invariants (shapes inside grid, uptake covering all phases,
// air/bone conventions); throws ConfigError on violation.
void validate_spec(const PhantomSpec& spec);

// Synthesizes the four phase volumes and masks.  Deterministic per spec.
PhantomResult generate_phantom(const PhantomSpec& spec);

// Draws a rigid transform uniformly within the configured bounds.
RigidTransform draw_transform(const MisalignParams& params, Rng& rng);

// Applies a rigid transform to volume and mask together: trilinear HU
// resampling, nearest-neighbor labels, out-of-field fill of -1000 HU /
// label 0.  The transform must respect the bounds in params.
std::pair<Volume, SegmentationMask> apply_misalignment(
    const Volume& volume, const SegmentationMask& mask,
    const MisalignParams& params, const RigidTransform& transform);

// Convenience overload that draws the transform from a dedicated seed.
std::pair<Volume, SegmentationMask> apply_misalignment(
    const Volume& volume, const SegmentationMask& mask,
    const MisalignParams& params, uint64_t seed);

}  // namespace ctphase
