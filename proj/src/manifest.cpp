#include "ulsa/manifest.hpp"

#include <fstream>
#include <map>
#include "json.hpp"

#include "ulsa/error.hpp"
#include "ulsa/image.hpp"

namespace ulsa {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view to_string(Origin o) { return o == Origin::real ? "real" : "synthetic"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw IoError("unknown split '" + std::string(s) + "'");
}

Origin parse_origin(std::string_view s) {
  if (s == "real") return Origin::real;
  if (s == "synthetic") return Origin::synthetic;
  throw IoError("unknown origin '" + std::string(s) + "'");
}

std::filesystem::path Manifest::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : root / p;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.value("manifest_version", kManifestVersion) != kManifestVersion)
        throw IoError("unsupported manifest_version");
      ManifestRecord r;
      r.image_path = j.at("image_path").get<std::string>();
      r.stain = j.at("stain").get<std::string>();
      r.split = parse_split(j.at("split").get<std::string>());
      r.origin = parse_origin(j.value("origin", std::string("real")));
      r.patient_id = j.value("patient_id", r.image_path);
      if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<int>();
      if (j.contains("mask_path") && !j["mask_path"].is_null()) r.mask_path = j["mask_path"].get<std::string>();
      if (j.contains("derived_from") && !j["derived_from"].is_null())
        r.derived_from = j["derived_from"].get<std::string>();
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  namespace fs = std::filesystem;
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  fs::create_directories(dir);
  auto rebase = [&](const std::string& p) {
    const fs::path abs = fs::absolute(m.resolve(p)).lexically_normal();
    return fs::path(p).is_absolute() ? abs.string() : abs.lexically_relative(fs::absolute(dir)).string();
  };
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : m.records) {
    nlohmann::ordered_json j;
    j["manifest_version"] = kManifestVersion;
    j["image_path"] = rebase(r.image_path);
    j["stain"] = r.stain;
    j["split"] = to_string(r.split);
    j["origin"] = to_string(r.origin);
    j["patient_id"] = r.patient_id;
    if (r.label) j["label"] = *r.label;
    if (r.mask_path) j["mask_path"] = rebase(*r.mask_path);
    if (r.derived_from) j["derived_from"] = rebase(*r.derived_from);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("short write on manifest " + path.string());
}

std::vector<ManifestIssue> validate_manifest(const Manifest& m, bool check_files) {
  std::vector<ManifestIssue> issues;
  std::map<std::string, Split> patient_split;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    auto [it, inserted] = patient_split.emplace(r.patient_id, r.split);
    if (!inserted && it->second != r.split)
      issues.push_back({i, "patient " + r.patient_id + " appears in splits " + std::string(to_string(it->second)) +
                               " and " + std::string(to_string(r.split))});
    if (r.label && r.mask_path) issues.push_back({i, "record carries both label and mask_path"});
    if (!check_files) continue;
    try {
      const Image8 img = read_png_rgb(m.resolve(r.image_path));
      if (r.mask_path) {
        const Gray8 mask = read_png_gray(m.resolve(*r.mask_path));
        if (mask.height != img.height || mask.width != img.width)
          issues.push_back({i, "mask size differs from image size"});
      }
    } catch (const Error& e) {
      issues.push_back({i, e.what()});
    }
  }
  return issues;
}

}  // namespace ulsa
