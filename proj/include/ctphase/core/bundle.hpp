#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "ctphase/core/stats.hpp"
#include "ctphase/core/volume.hpp"

namespace ctphase {

// On-disk volume bundle: a directory holding header.json + volume.f32 and,
// when a mask is attached, mask.u16 + labels.json.  Payloads are raw
// little-endian and round-trip bit-exactly.
struct LoadedBundle {
  Volume volume;
  std::optional<SegmentationMask> mask;
};

LoadedBundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const Volume& volume, const SegmentationMask* mask,
                 const std::filesystem::path& dir);

// Dataset manifest: patient_id -> phase -> bundle directory.  Paths are
// stored relative to the manifest's directory and resolved on load.
using Manifest = std::map<std::string, std::map<Phase, std::filesystem::path>>;

Manifest load_manifest(const std::filesystem::path& manifest_path);
void save_manifest(const Manifest& manifest,
                   const std::filesystem::path& manifest_path);

// Per-bundle organ statistics sidecar (organ_stats.json), precomputed at
// dataset build so training can target per-organ mean HU without ever reading
// target voxels at train time.
void save_organ_stats(const OrganStats& stats,
                      const std::filesystem::path& path);
OrganStats load_organ_stats(const std::filesystem::path& path);

}  // namespace ctphase
