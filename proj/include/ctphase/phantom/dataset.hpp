#pragma once

#include <filesystem>

#include "ctphase/common/jsonio.hpp"
#include "ctphase/core/bundle.hpp"
#include "ctphase/phantom/phantom.hpp"

namespace ctphase {

// Knobs for writing a whole multi-patient dataset.  Geometry and physiology
// come from the default organ table; patient-to-patient variation comes from
// uptake jitter, noise, and misalignment draws keyed by patient id.
struct DatasetParams {
  uint64_t seed = 0;
  int n_patients = 20;
  std::string patient_prefix = "p";
  GridDims dims{16, 64, 64};
  GridSpacing spacing_mm{2.5, 1.0, 1.0};
  double noise_std = 10.0;
  double uptake_jitter = 0.10;
  MisalignParams misalign;
};

// Parses DatasetParams from a JSON object; unknown keys are config errors.
DatasetParams dataset_params_from_json(const json& j);

// Generates every patient and writes one bundle per (patient, phase), each
// with a measured organ_stats.json sidecar, plus manifest.json at the root.
// Returns the manifest (paths resolved absolute).
Manifest write_dataset(const DatasetParams& params,
                       const std::filesystem::path& out_dir);

}  // namespace ctphase
