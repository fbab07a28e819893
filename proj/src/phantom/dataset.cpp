#include "ctphase/phantom/dataset.hpp"

#include <cstdio>

#include "ctphase/common/log.hpp"

namespace ctphase {

DatasetParams dataset_params_from_json(const json& j) {
  DatasetParams p;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      p.seed = value.get<uint64_t>();
    } else if (key == "n_patients") {
      p.n_patients = value.get<int>();
    } else if (key == "patient_prefix") {
      p.patient_prefix = value.get<std::string>();
    } else if (key == "dims") {
      if (!value.is_array() || value.size() != 3) {
        throw ConfigError("dims must be a 3-element array [z,y,x]");
      }
      p.dims = {value[0].get<Eigen::Index>(), value[1].get<Eigen::Index>(),
                value[2].get<Eigen::Index>()};
    } else if (key == "spacing_mm") {
      if (!value.is_array() || value.size() != 3) {
        throw ConfigError("spacing_mm must be a 3-element array [z,y,x]");
      }
      p.spacing_mm = {value[0].get<double>(), value[1].get<double>(),
                      value[2].get<double>()};
    } else if (key == "noise_std") {
      p.noise_std = value.get<double>();
    } else if (key == "uptake_jitter") {
      p.uptake_jitter = value.get<double>();
    } else if (key == "misalign") {
      for (const auto& [mkey, mvalue] : value.items()) {
        if (mkey == "enabled") {
          p.misalign.enabled = mvalue.get<bool>();
        } else if (mkey == "max_translation_mm") {
          p.misalign.max_translation_mm = mvalue.get<double>();
        } else if (mkey == "max_rotation_deg") {
          p.misalign.max_rotation_deg = mvalue.get<double>();
        } else {
          throw ConfigError("unknown misalign key \"" + mkey + "\"");
        }
      }
    } else {
      throw ConfigError("unknown dataset key \"" + key + "\"");
    }
  }
  if (p.n_patients <= 0) {
    throw ConfigError("n_patients must be positive");
  }
  return p;
}

Manifest write_dataset(const DatasetParams& params,
                       const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  Manifest manifest;
  for (int i = 0; i < params.n_patients; ++i) {
    char suffix[16];
    std::snprintf(suffix, sizeof(suffix), "%03d", i);
    const std::string patient_id = params.patient_prefix + suffix;

    PhantomSpec spec = default_phantom_spec(params.seed, patient_id);
    spec.dims = params.dims;
    spec.spacing_mm = params.spacing_mm;
    spec.noise_std = params.noise_std;
    spec.uptake_jitter = params.uptake_jitter;
    spec.misalign = params.misalign;

    PhantomResult result = generate_phantom(spec);
    for (Phase p : kAllPhases) {
      const auto bundle_dir = out_dir / patient_id / phase_to_string(p);
      save_bundle(result.volumes.at(p), &result.masks.at(p), bundle_dir);
      // Measured per-organ means on this very bundle: the only target-side
      // statistics training is allowed to consume.
      const auto stats =
          compute_organ_stats(result.volumes.at(p), result.masks.at(p));
      save_organ_stats(stats, bundle_dir / "organ_stats.json");
      manifest[patient_id][p] = std::filesystem::absolute(bundle_dir);
    }
    log::debug("wrote patient %s", patient_id.c_str());
  }
  save_manifest(manifest, out_dir / "manifest.json");
  log::info("dataset: %d patients x %d phases under %s", params.n_patients,
            kNumPhases, out_dir.string().c_str());
  return manifest;
}

}  // namespace ctphase
