#include "ulsa/translate.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "ulsa/error.hpp"
#include "ulsa/parallel.hpp"

namespace ulsa {

StainSet::StainSet(std::vector<StainId> stains) : stains_(std::move(stains)) {
  std::set<std::string> names;
  bool has_source = false, has_target = false;
  for (const auto& s : stains_) {
    if (s.name.empty()) throw ConfigError("stain names must be non-empty");
    if (!names.insert(s.name).second) throw ConfigError("duplicate stain name '" + s.name + "'");
    has_source = has_source || s.role == StainRole::source;
    has_target = has_target || s.role == StainRole::target;
  }
  if (!has_source || !has_target) throw ConfigError("a stain set needs at least one source and one target stain");
}

std::vector<std::string> StainSet::sources() const {
  std::vector<std::string> out;
  for (const auto& s : stains_)
    if (s.role == StainRole::source) out.push_back(s.name);
  return out;
}

std::vector<std::string> StainSet::targets() const {
  std::vector<std::string> out;
  for (const auto& s : stains_)
    if (s.role == StainRole::target) out.push_back(s.name);
  return out;
}

bool StainSet::contains(const std::string& name) const {
  return std::any_of(stains_.begin(), stains_.end(), [&](const StainId& s) { return s.name == name; });
}

StainRole StainSet::role(const std::string& name) const {
  for (const auto& s : stains_)
    if (s.name == name) return s.role;
  throw ConfigError("unknown stain '" + name + "'");
}

void ParametricStain::validate() const {
  for (std::size_t c = 0; c < 3; ++c) {
    if (dark[c] < 0.0 || dark[c] > 1.0 || light[c] < 0.0 || light[c] > 1.0)
      throw ConfigError("parametric stain colours must lie in [0, 1]");
    if (!(light[c] > dark[c])) throw ConfigError("parametric stain light colour must be brighter than dark per channel");
  }
  if (!(gamma >= 0.5 && gamma <= 2.0)) throw ConfigError("parametric stain gamma must lie in [0.5, 2]");
}

Image render_stain(const Tensor& density, const ParametricStain& stain) {
  if (density.rank() != 2) throw ShapeMismatch("render_stain: density must be (H, W), got " + shape_str(density.shape()));
  const std::size_t h = density.dim(0), w = density.dim(1);
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double t = std::pow(std::clamp(density[y * w + x], 0.0, 1.0), stain.gamma);
      for (std::size_t c = 0; c < 3; ++c) img.set(y, x, c, stain.light[c] + (stain.dark[c] - stain.light[c]) * t);
    }
  return img;
}

Tensor recover_density(const Image& img, const ParametricStain& stain) {
  Rgb axis{};
  double len2 = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    axis[c] = stain.dark[c] - stain.light[c];
    len2 += axis[c] * axis[c];
  }
  Tensor d({img.height(), img.width()});
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      double t = 0.0;
      for (std::size_t c = 0; c < 3; ++c) t += (img.at(y, x, c) - stain.light[c]) * axis[c];
      t = std::clamp(t / len2, 0.0, 1.0);
      d[y * img.width() + x] = std::pow(t, 1.0 / stain.gamma);
    }
  return d;
}

Image parametric_translate(const Image& img, const ParametricStain& src, const ParametricStain& dst) {
  return render_stain(recover_density(img, src), dst);
}

ParametricTranslator::ParametricTranslator(std::map<std::string, ParametricStain> stains) : stains_(std::move(stains)) {
  for (const auto& [name, s] : stains_) s.validate();
}

bool ParametricTranslator::covers(const std::string& src, const std::string& dst) const {
  return src != dst && stains_.contains(src) && stains_.contains(dst);
}

Image ParametricTranslator::translate(const Image& img, const std::string& src, const std::string& dst,
                                      const std::string&) const {
  if (!covers(src, dst)) throw MissingTranslator("parametric translator has no stain pair " + src + " -> " + dst);
  return parametric_translate(img, stains_.at(src), stains_.at(dst));
}

FileImportTranslator::FileImportTranslator(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path FileImportTranslator::path_for(const std::string& src, const std::string& dst,
                                                     const std::string& stem) const {
  return root_ / (src + "_to_" + dst) / (stem + ".png");
}

bool FileImportTranslator::covers(const std::string& src, const std::string& dst) const {
  return src != dst && std::filesystem::is_directory(root_ / (src + "_to_" + dst));
}

Image FileImportTranslator::translate(const Image& img, const std::string& src, const std::string& dst,
                                      const std::string& stem) const {
  const auto path = path_for(src, dst, stem);
  if (!std::filesystem::exists(path)) throw IoError("no imported translation at " + path.string());
  Image out = read_png(path);
  if (out.height() != img.height() || out.width() != img.width())
    throw ShapeMismatch("imported translation " + path.string() + " differs in size from its source image");
  return out;
}

void TranslatorRegistry::add(std::shared_ptr<const StainTranslator> translator) {
  translators_.push_back(std::move(translator));
}

bool TranslatorRegistry::covers(const std::string& src, const std::string& dst) const {
  return std::any_of(translators_.begin(), translators_.end(), [&](const auto& t) { return t->covers(src, dst); });
}

Image TranslatorRegistry::translate(const Image& img, const std::string& src, const std::string& dst,
                                    const std::string& stem) const {
  if (src == dst) throw std::invalid_argument("stain translation requires distinct stains, got " + src + " twice");
  for (const auto& t : translators_)
    if (t->covers(src, dst)) return t->translate(img, src, dst, stem);
  throw MissingTranslator("no translator registered for " + src + " -> " + dst);
}

void TranslatorRegistry::require_complete(const StainSet& stains) const {
  std::string missing;
  for (const auto& s : stains.sources())
    for (const auto& t : stains.targets())
      if (!covers(s, t)) missing += (missing.empty() ? "" : ", ") + s + " -> " + t;
  if (!missing.empty()) throw MissingTranslator("missing stain translators: " + missing);
}

BatchTranslateResult batch_translate(const Manifest& in, const std::string& dst, const TranslatorRegistry& registry,
                                     const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());
  {
    const fs::path probe = out_dir / ".write_probe";
    std::FILE* f = std::fopen(probe.c_str(), "w");
    if (!f) throw IoError("output directory " + out_dir.string() + " is not writable");
    std::fclose(f);
    fs::remove(probe);
  }

  const std::size_t n = in.records.size();
  std::vector<std::optional<ManifestRecord>> produced(n);
  std::vector<std::string> errors(n);
  parallel_for(n, [&](std::size_t i) {
    const ManifestRecord& r = in.records[i];
    try {
      const fs::path src_path = in.resolve(r.image_path);
      const std::string stem = src_path.stem().string();
      const fs::path dir = out_dir / (r.stain + "_to_" + dst);
      fs::create_directories(dir);
      const Image translated = registry.translate(read_png(src_path), r.stain, dst, stem);
      const fs::path img_out = dir / (stem + ".png");
      write_png(img_out, translated);
      ManifestRecord o = r;
      o.image_path = fs::absolute(img_out).string();
      o.stain = dst;
      o.origin = Origin::synthetic;
      o.derived_from = fs::absolute(src_path).lexically_normal().string();
      if (r.mask_path) {
        fs::create_directories(dir / "masks");
        const fs::path mask_out = dir / "masks" / (stem + ".png");
        fs::copy_file(in.resolve(*r.mask_path), mask_out, fs::copy_options::overwrite_existing);
        o.mask_path = fs::absolute(mask_out).string();
      }
      produced[i] = std::move(o);
    } catch (const std::exception& e) {
      errors[i] = r.image_path + ": " + e.what();
    }
  });

  BatchTranslateResult result;
  result.manifest.root = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    if (produced[i]) {
      result.manifest.records.push_back(std::move(*produced[i]));
    } else {
      ++result.failed;
      result.errors.push_back(std::move(errors[i]));
    }
  }
  return result;
}

}  // namespace ulsa
