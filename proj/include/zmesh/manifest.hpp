#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zmesh/volume.hpp"

namespace zmesh {

// Case manifest: line-delimited JSON, one record per case. Paths are
// relative to the manifest's directory:
//   {"id":"c7_0001","image":"c7_0001_img.zvol","zones":"c7_0001_zones.zvol",
//    "lesions":"c7_0001_lesions.zvol","label":1}
// "lesions" is null for cases without voxel annotations.

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string zones;
  std::optional<std::string> lesions;
  bool positive = false;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_manifest: bad json at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.image = j.at("image").get<std::string>();
    e.zones = j.at("zones").get<std::string>();
    if (j.contains("lesions") && !j.at("lesions").is_null()) {
      e.lesions = j.at("lesions").get<std::string>();
    }
    e.positive = j.at("label").get<int>() != 0;
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void write_manifest(const std::vector<ManifestEntry>& entries,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  for (const auto& e : entries) {
    nlohmann::json j;
    j["id"] = e.id;
    j["image"] = e.image;
    j["zones"] = e.zones;
    j["lesions"] = e.lesions ? nlohmann::json(*e.lesions) : nlohmann::json();
    j["label"] = e.positive ? 1 : 0;
    out << j.dump() << '\n';
  }
}

inline CaseRecord load_case(const ManifestEntry& entry,
                            const std::string& base_dir) {
  namespace fs = std::filesystem;
  CaseRecord rec;
  rec.id = entry.id;
  rec.positive = entry.positive;
  rec.image = load_volume((fs::path(base_dir) / entry.image).string());
  rec.zones =
      ZonalMask::from_volume(load_volume((fs::path(base_dir) / entry.zones).string()));
  if (entry.lesions) {
    rec.lesions = load_volume((fs::path(base_dir) / *entry.lesions).string());
  }
  return rec;
}

inline std::vector<CaseRecord> load_cases(const std::string& manifest_path) {
  const std::string dir =
      std::filesystem::path(manifest_path).parent_path().string();
  std::vector<CaseRecord> cases;
  for (const auto& e : read_manifest(manifest_path)) {
    cases.push_back(load_case(e, dir.empty() ? "." : dir));
  }
  return cases;
}

/// Writes the case's volumes next to the manifest and returns its entry.
inline ManifestEntry save_case(const CaseRecord& rec, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ManifestEntry e;
  e.id = rec.id;
  e.positive = rec.positive;
  e.image = rec.id + "_img.zvol";
  e.zones = rec.id + "_zones.zvol";
  save_volume(rec.image, (fs::path(dir) / e.image).string());
  save_volume(rec.zones.to_volume(), (fs::path(dir) / e.zones).string());
  if (rec.lesions) {
    e.lesions = rec.id + "_lesions.zvol";
    save_volume(*rec.lesions, (fs::path(dir) / *e.lesions).string());
  }
  return e;
}

inline std::string save_dataset(const std::vector<CaseRecord>& cases,
                                const std::string& dir) {
  std::vector<ManifestEntry> entries;
  entries.reserve(cases.size());
  for (const auto& c : cases) entries.push_back(save_case(c, dir));
  const std::string manifest =
      (std::filesystem::path(dir) / "cases.jsonl").string();
  write_manifest(entries, manifest);
  return manifest;
}

}  // namespace zmesh
