#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ulsa/image.hpp"
#include "ulsa/manifest.hpp"

namespace ulsa {

enum class StainRole { source, target };

struct StainId {
  std::string name;
  StainRole role = StainRole::source;
};

/// Source stains S (annotated) and target stains T (unannotated).
class StainSet {
 public:
  StainSet() = default;
  /// Throws ConfigError on duplicate names or if S or T is empty.
  explicit StainSet(std::vector<StainId> stains);

  const std::vector<StainId>& all() const { return stains_; }
  std::vector<std::string> sources() const;
  std::vector<std::string> targets() const;
  bool contains(const std::string& name) const;
  StainRole role(const std::string& name) const;

 private:
  std::vector<StainId> stains_;
};

/// Single-chromophore synthetic stain: a structure of density d renders as
/// lerp(light, dark, d^gamma).
struct ParametricStain {
  Rgb dark{};
  Rgb light{};
  double gamma = 1.0;

  /// Throws ConfigError unless colours are in [0,1], light > dark per
  /// channel and gamma in [0.5, 2].
  void validate() const;
};

/// Density field (H, W) -> image under `stain`.
Image render_stain(const Tensor& density, const ParametricStain& stain);
/// Per-pixel density recovered by projecting onto the stain's colour line
/// (least squares), clamping to [0, 1] and undoing gamma.
Tensor recover_density(const Image& img, const ParametricStain& stain);
Image parametric_translate(const Image& img, const ParametricStain& src, const ParametricStain& dst);

/// Stain translation G: source-stain image -> the same structures in
/// another stain. The caller carries labels over unchanged.
class StainTranslator {
 public:
  virtual ~StainTranslator() = default;
  virtual bool covers(const std::string& src, const std::string& dst) const = 0;
  /// `stem` is the source image's file stem (used by file-backed translators).
  virtual Image translate(const Image& img, const std::string& src, const std::string& dst,
                          const std::string& stem) const = 0;
};

class ParametricTranslator final : public StainTranslator {
 public:
  explicit ParametricTranslator(std::map<std::string, ParametricStain> stains);
  bool covers(const std::string& src, const std::string& dst) const override;
  Image translate(const Image& img, const std::string& src, const std::string& dst,
                  const std::string& stem) const override;

 private:
  std::map<std::string, ParametricStain> stains_;
};

/// Externally produced translations laid out as <root>/<src>_to_<dst>/<stem>.png.
class FileImportTranslator final : public StainTranslator {
 public:
  explicit FileImportTranslator(std::filesystem::path root);
  bool covers(const std::string& src, const std::string& dst) const override;
  Image translate(const Image& img, const std::string& src, const std::string& dst,
                  const std::string& stem) const override;
  std::filesystem::path path_for(const std::string& src, const std::string& dst, const std::string& stem) const;

 private:
  std::filesystem::path root_;
};

/// Ordered list of translators; the first one covering a pair wins.
class TranslatorRegistry {
 public:
  void add(std::shared_ptr<const StainTranslator> translator);
  bool covers(const std::string& src, const std::string& dst) const;
  /// Throws std::invalid_argument for src == dst, MissingTranslator when uncovered.
  Image translate(const Image& img, const std::string& src, const std::string& dst, const std::string& stem) const;
  /// Fails fast (MissingTranslator listing the gaps) unless every
  /// source -> target pair is covered.
  void require_complete(const StainSet& stains) const;

 private:
  std::vector<std::shared_ptr<const StainTranslator>> translators_;
};

struct BatchTranslateResult {
  Manifest manifest;
  std::size_t failed = 0;
  std::vector<std::string> errors;
};

/// Translates every record of `in` into stain `dst`, writing
/// <out_dir>/<src>_to_<dst>/<stem>.png (plus masks/<stem>.png, copied
/// byte-for-byte). Emitted records carry stain = dst, origin = synthetic,
/// the source's label/mask/split/patient and derived_from = its image path.
/// Per-record failures are collected and skipped; an unwritable out_dir throws.
BatchTranslateResult batch_translate(const Manifest& in, const std::string& dst, const TranslatorRegistry& registry,
                                     const std::filesystem::path& out_dir);

}  // namespace ulsa
