#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/json_io.hpp"

namespace headprobe {

inline constexpr const char* kManifestFileName = "manifest.json";

/// Ground truth for one benchmark file.
struct ManifestEntry {
  std::string file;
  bool backdoored = false;
  std::optional<std::size_t> target;  // absent for clean and all-to-all models
  std::string mechanism;              // "none" for clean models
  Json params = Json::object();       // mechanism parameters and certificate
};

using Manifest = std::vector<ManifestEntry>;

inline Json to_json(const ManifestEntry& e) {
  Json j = e.params;
  j["file"] = e.file;
  j["label"] = e.backdoored ? "backdoor" : "clean";
  j["target"] = e.target ? Json(*e.target) : Json(nullptr);
  j["mechanism"] = e.mechanism;
  return j;
}

inline Json to_json(const Manifest& m) {
  Json arr = Json::array();
  for (const auto& e : m) arr.push_back(to_json(e));
  return arr;
}

inline Manifest manifest_from_json(const Json& j) {
  if (!j.is_array()) throw Error(ErrorCode::MalformedDocument, "manifest must be an array");
  Manifest m;
  try {
    for (const auto& item : j) {
      ManifestEntry e;
      e.file = item.at("file").get<std::string>();
      const auto label = item.at("label").get<std::string>();
      if (label != "backdoor" && label != "clean")
        throw Error(ErrorCode::MalformedDocument, "manifest label must be backdoor|clean");
      e.backdoored = label == "backdoor";
      if (item.contains("target") && !item.at("target").is_null())
        e.target = item.at("target").get<std::size_t>();
      e.mechanism = item.value("mechanism", std::string(e.backdoored ? "unknown" : "none"));
      for (const auto& [key, value] : item.items())
        if (key != "file" && key != "label" && key != "target" && key != "mechanism") e.params[key] = value;
      m.push_back(std::move(e));
    }
  } catch (const Json::exception& ex) {
    throw Error(ErrorCode::MalformedDocument, ex.what());
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(parse_json_text(read_text_file(path)));
}

inline std::map<std::string, ManifestEntry> index_by_file(const Manifest& m) {
  std::map<std::string, ManifestEntry> out;
  for (const auto& e : m) out.emplace(e.file, e);
  return out;
}

}  // namespace headprobe
