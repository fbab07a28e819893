#include "ctphase/core/bundle.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "ctphase/common/jsonio.hpp"

// Payloads are declared little-endian; this implementation writes host bytes.
static_assert(std::endian::native == std::endian::little,
              "bundle I/O assumes a little-endian host");

namespace ctphase {
namespace {

const char* kHeaderName = "header.json";
const char* kVolumeName = "volume.f32";
const char* kMaskName = "mask.u16";
const char* kLabelsName = "labels.json";

std::vector<char> read_raw(const std::filesystem::path& path,
                           size_t expected_bytes) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) {
    throw FormatError("missing payload file: " + path.string());
  }
  const auto actual = static_cast<size_t>(in.tellg());
  if (actual != expected_bytes) {
    throw IntegrityError(path.string() + ": expected " +
                         std::to_string(expected_bytes) + " bytes, found " +
                         std::to_string(actual));
  }
  std::vector<char> bytes(expected_bytes);
  in.seekg(0);
  in.read(bytes.data(), static_cast<std::streamsize>(expected_bytes));
  if (!in) {
    throw IntegrityError("short read from " + path.string());
  }
  return bytes;
}

void write_raw(const void* data, size_t bytes,
               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out.write(static_cast<const char*>(data),
            static_cast<std::streamsize>(bytes));
  if (!out) {
    throw DataError("write failed: " + path.string());
  }
}

}  // namespace

LoadedBundle load_bundle(const std::filesystem::path& dir) {
  const auto header_path = dir / kHeaderName;
  if (!std::filesystem::exists(header_path)) {
    throw FormatError("not a volume bundle (no header.json): " + dir.string());
  }
  const json header = read_json_file(header_path);
  const std::string where = header_path.string();

  const auto& jdims = require_field(header, "dims", where);
  const auto& jspacing = require_field(header, "spacing_mm", where);
  if (!jdims.is_array() || jdims.size() != 3 || !jspacing.is_array() ||
      jspacing.size() != 3) {
    throw FormatError(where + ": dims and spacing_mm must be 3-element arrays");
  }
  const std::string dtype = require_field(header, "dtype", where);
  if (dtype != "f32le") {
    throw FormatError(where + ": unsupported dtype \"" + dtype + "\"");
  }
  const int version = require_field(header, "version", where);
  if (version != 1) {
    throw FormatError(where + ": unsupported version " +
                      std::to_string(version));
  }

  LoadedBundle out;
  Volume& v = out.volume;
  v.dims = {jdims[0].get<Eigen::Index>(), jdims[1].get<Eigen::Index>(),
            jdims[2].get<Eigen::Index>()};
  v.spacing_mm = {jspacing[0].get<double>(), jspacing[1].get<double>(),
                  jspacing[2].get<double>()};
  v.phase = phase_from_string(
      require_field(header, "phase", where).get<std::string>());
  v.patient_id = require_field(header, "patient_id", where).get<std::string>();

  if (v.dims.z <= 0 || v.dims.y <= 0 || v.dims.x <= 0) {
    throw FormatError(where + ": dims must be positive");
  }
  const auto count = static_cast<size_t>(v.dims.count());
  const auto vol_bytes = read_raw(dir / kVolumeName, count * sizeof(float));
  v.data.resize(static_cast<Eigen::Index>(count));
  std::memcpy(v.data.data(), vol_bytes.data(), vol_bytes.size());
  v.clamp_to_hu_range();
  v.validate();

  if (std::filesystem::exists(dir / kMaskName)) {
    SegmentationMask mask;
    mask.dims = v.dims;
    mask.spacing_mm = v.spacing_mm;
    const auto mask_bytes =
        read_raw(dir / kMaskName, count * sizeof(uint16_t));
    mask.labels.resize(static_cast<Eigen::Index>(count));
    std::memcpy(mask.labels.data(), mask_bytes.data(), mask_bytes.size());

    const auto labels_path = dir / kLabelsName;
    if (!std::filesystem::exists(labels_path)) {
      throw FormatError("bundle has mask.u16 but no labels.json: " +
                        dir.string());
    }
    const json table = read_json_file(labels_path);
    for (const auto& [key, value] : table.items()) {
      OrganInfo info;
      info.name =
          require_field(value, "name", labels_path.string()).get<std::string>();
      info.category = category_from_string(
          require_field(value, "category", labels_path.string())
              .get<std::string>());
      mask.organ_table[std::stoi(key)] = info;
    }
    mask.validate();
    out.mask = std::move(mask);
  }
  return out;
}

void save_bundle(const Volume& volume, const SegmentationMask* mask,
                 const std::filesystem::path& dir) {
  volume.validate();
  if (mask) {
    require_congruent(volume, *mask);
    mask->validate();
  }
  std::filesystem::create_directories(dir);

  json header;
  header["dims"] = {volume.dims.z, volume.dims.y, volume.dims.x};
  header["spacing_mm"] = {volume.spacing_mm.z, volume.spacing_mm.y,
                          volume.spacing_mm.x};
  header["phase"] = phase_to_string(volume.phase);
  header["patient_id"] = volume.patient_id;
  header["dtype"] = "f32le";
  header["version"] = 1;
  write_json_file(header, dir / kHeaderName);

  write_raw(volume.data.data(),
            static_cast<size_t>(volume.data.size()) * sizeof(float),
            dir / kVolumeName);

  if (mask) {
    write_raw(mask->labels.data(),
              static_cast<size_t>(mask->labels.size()) * sizeof(uint16_t),
              dir / kMaskName);
    json table;
    for (const auto& [organ_id, info] : mask->organ_table) {
      table[std::to_string(organ_id)] = {
          {"name", info.name}, {"category", category_to_string(info.category)}};
    }
    write_json_file(table, dir / kLabelsName);
  }
}

Manifest load_manifest(const std::filesystem::path& manifest_path) {
  const json j = read_json_file(manifest_path);
  const auto base = manifest_path.parent_path();
  Manifest manifest;
  for (const auto& [patient_id, phases] : j.items()) {
    for (const auto& [phase_str, rel] : phases.items()) {
      std::filesystem::path p = rel.get<std::string>();
      if (p.is_relative()) p = base / p;
      manifest[patient_id][phase_from_string(phase_str)] = p;
    }
  }
  if (manifest.empty()) {
    throw DataError("manifest lists no patients: " + manifest_path.string());
  }
  return manifest;
}

void save_manifest(const Manifest& manifest,
                   const std::filesystem::path& manifest_path) {
  const auto base = manifest_path.parent_path();
  json j;
  for (const auto& [patient_id, phases] : manifest) {
    json entry;
    for (const auto& [phase, path] : phases) {
      entry[phase_to_string(phase)] =
          std::filesystem::relative(path, base).generic_string();
    }
    j[patient_id] = entry;
  }
  std::filesystem::create_directories(base);
  write_json_file(j, manifest_path);
}

void save_organ_stats(const OrganStats& stats,
                      const std::filesystem::path& path) {
  json j;
  for (const auto& rec : stats.records) {
    j[std::to_string(rec.organ_id)] = {{"mean_hu", rec.mean_hu},
                                       {"voxel_count", rec.voxel_count},
                                       {"volume_mm3", rec.volume_mm3}};
  }
  write_json_file(j, path);
}

OrganStats load_organ_stats(const std::filesystem::path& path) {
  const json j = read_json_file(path);
  OrganStats stats;
  for (const auto& [key, value] : j.items()) {
    OrganRecord rec;
    rec.organ_id = std::stoi(key);
    rec.mean_hu = require_field(value, "mean_hu", path.string()).get<double>();
    rec.voxel_count =
        require_field(value, "voxel_count", path.string()).get<int64_t>();
    rec.volume_mm3 =
        require_field(value, "volume_mm3", path.string()).get<double>();
    stats.records.push_back(rec);
  }
  std::sort(stats.records.begin(), stats.records.end(),
            [](const auto& a, const auto& b) { return a.organ_id < b.organ_id; });
  stats.n_org = static_cast<int>(stats.records.size());
  return stats;
}

}  // namespace ctphase
