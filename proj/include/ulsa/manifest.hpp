#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ulsa {

enum class Split { train, val, test };
enum class Origin { real, synthetic };

std::string_view to_string(Split s);
std::string_view to_string(Origin o);
Split parse_split(std::string_view s);
Origin parse_origin(std::string_view s);

/// One line of a manifest. Paths are stored as written (relative paths
/// resolve against the manifest's directory).
struct ManifestRecord {
  std::string image_path;
  std::string stain;
  Split split = Split::train;
  std::optional<int> label;
  std::optional<std::string> mask_path;
  Origin origin = Origin::real;
  std::string patient_id;
  /// For synthetic records: image_path of the record it was translated from.
  std::optional<std::string> derived_from;

  bool labeled() const { return label.has_value() || mask_path.has_value(); }
  bool operator==(const ManifestRecord&) const = default;
};

inline constexpr int kManifestVersion = 1;

/// JSON-lines dataset index. Each line is an object with the fields
///   manifest_version (1), image_path, stain, split (train|val|test),
///   origin (real|synthetic), patient_id, and optionally label (int),
///   mask_path, derived_from.
struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& path) const;
};

Manifest read_manifest(const std::filesystem::path& path);
/// Writes `m` to `path`, rewriting relative paths so they resolve against
/// the new file's directory.
void write_manifest(const std::filesystem::path& path, const Manifest& m);

struct ManifestIssue {
  std::size_t line;  ///< 0-based record index
  std::string message;
};

/// Structural checks: patient-level split disjointness and at most one of
/// label/mask_path per record. With check_files, every referenced file must
/// exist and decode, and masks must match their image's size.
std::vector<ManifestIssue> validate_manifest(const Manifest& m, bool check_files);

}  // namespace ulsa
