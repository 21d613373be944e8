#include "ulsa/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <stdexcept>

#include "ulsa/error.hpp"
#include "ulsa/parallel.hpp"

namespace ulsa {
namespace {

// Single-channel separable Gaussian, reflect-101 borders.
std::vector<double> smooth(const std::vector<double>& src, std::size_t h, std::size_t w, int kernel, double sigma) {
  const auto k = gaussian_kernel(kernel, sigma);
  const int r = kernel / 2;
  auto refl = [](std::ptrdiff_t i, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (m == 1) return std::size_t{0};
    while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
    return static_cast<std::size_t>(i);
  };
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[static_cast<std::size_t>(j + r)] * src[y * w + refl(static_cast<std::ptrdiff_t>(x) + j, w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[static_cast<std::size_t>(j + r)] * tmp[refl(static_cast<std::ptrdiff_t>(y) + j, h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

constexpr int kPlacementAttempts = 40;

struct Canvas {
  std::size_t h, w;
  std::vector<std::uint8_t> mask;
  std::vector<bool> occupied;  // structure pixels dilated by one pixel
  std::vector<double> level;

  bool free(const std::vector<std::size_t>& pixels) const {
    return std::none_of(pixels.begin(), pixels.end(), [&](std::size_t p) { return occupied[p]; });
  }

  void claim(const std::vector<std::size_t>& pixels) {
    for (std::size_t p : pixels) {
      const std::size_t y = p / w, x = p % w;
      for (std::size_t dy = y ? y - 1 : 0; dy <= std::min(y + 1, h - 1); ++dy)
        for (std::size_t dx = x ? x - 1 : 0; dx <= std::min(x + 1, w - 1); ++dx) occupied[dy * w + dx] = true;
    }
  }
};

}  // namespace

Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  const std::size_t h = spec.height, w = spec.width;
  if (h == 0 || w == 0) throw std::invalid_argument("scene size must be positive");
  Canvas canvas{h, w, std::vector<std::uint8_t>(h * w, kBackground), std::vector<bool>(h * w, false),
                std::vector<double>(h * w, spec.background_density)};
  Scene scene;

  auto count = [&](const BlobBudget& b) {
    return b.max_count <= b.min_count ? b.min_count
                                      : b.min_count + static_cast<int>(rng.index(static_cast<std::size_t>(b.max_count - b.min_count + 1)));
  };

  const int n_glom = count(spec.glomeruli);
  for (int i = 0; i < n_glom; ++i) {
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const double r = rng.uniform(spec.glomeruli.min_radius, spec.glomeruli.max_radius);
      const double cy = rng.uniform(r, static_cast<double>(h) - r), cx = rng.uniform(r, static_cast<double>(w) - r);
      const double a2 = rng.uniform(0.0, 0.12), a3 = rng.uniform(0.0, 0.08);
      const double p2 = rng.uniform(0.0, 2 * std::numbers::pi), p3 = rng.uniform(0.0, 2 * std::numbers::pi);
      std::vector<std::size_t> pixels;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const double th = std::atan2(dy, dx);
          const double rad = r * (1.0 + a2 * std::sin(2 * th + p2) + a3 * std::sin(3 * th + p3));
          if (dy * dy + dx * dx <= rad * rad) pixels.push_back(y * w + x);
        }
      if (pixels.empty() || !canvas.free(pixels)) continue;
      for (std::size_t p : pixels) {
        canvas.mask[p] = kGlomerulus;
        canvas.level[p] = spec.glomeruli.density + rng.uniform(-0.08, 0.08);
      }
      canvas.claim(pixels);
      ++scene.glomerulus_count;
      break;
    }
  }

  const int n_tub = count(spec.tubules);
  for (int i = 0; i < n_tub; ++i) {
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const double r = rng.uniform(spec.tubules.min_radius, spec.tubules.max_radius);
      const double a = r * rng.uniform(1.3, 1.8), b = r * rng.uniform(0.6, 0.8);
      const double phi = rng.uniform(0.0, std::numbers::pi);
      const double cy = rng.uniform(a, static_cast<double>(h) - a), cx = rng.uniform(a, static_cast<double>(w) - a);
      const double lumen = rng.uniform(0.35, 0.5);
      std::vector<std::size_t> outer, wall;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const double u = dx * std::cos(phi) + dy * std::sin(phi), v = -dx * std::sin(phi) + dy * std::cos(phi);
          const double q = (u / a) * (u / a) + (v / b) * (v / b);
          if (q > 1.0) continue;
          outer.push_back(y * w + x);
          if (q > lumen * lumen) wall.push_back(y * w + x);
        }
      if (wall.empty() || !canvas.free(outer)) continue;
      for (std::size_t p : wall) {
        canvas.mask[p] = kTubule;
        canvas.level[p] = spec.tubules.density;
      }
      canvas.claim(outer);
      ++scene.tubule_count;
      break;
    }
  }

  std::vector<double> noise(h * w);
  for (auto& v : noise) v = rng.normal();
  noise = smooth(noise, h, w, 5, 1.2);
  double sd = 0.0;
  for (double v : noise) sd += v * v;
  sd = std::sqrt(sd / static_cast<double>(noise.size()));
  const auto soft = smooth(canvas.level, h, w, 3, 0.7);

  scene.density = Tensor({h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    scene.density[i] = std::clamp(soft[i] + spec.texture * noise[i] / std::max(sd, 1e-12), 0.0, 1.0);
  scene.mask = Gray8{h, w, std::move(canvas.mask)};
  return scene;
}

std::vector<Tile> tile_and_filter(const Image& img, const TileOptions& options) {
  if (options.tile == 0 || options.stride == 0) throw std::invalid_argument("tile and stride must be positive");
  if (img.height() < options.tile || img.width() < options.tile)
    throw std::invalid_argument("image smaller than the tile size");
  std::vector<Tile> tiles;
  for (std::size_t y = 0; y + options.tile <= img.height(); y += options.stride)
    for (std::size_t x = 0; x + options.tile <= img.width(); x += options.stride) {
      std::size_t tissue = 0;
      Tensor px({options.tile, options.tile, 3});
      for (std::size_t dy = 0; dy < options.tile; ++dy)
        for (std::size_t dx = 0; dx < options.tile; ++dx) {
          const Rgb p = img.pixel(y + dy, x + dx);
          if ((p[0] + p[1] + p[2]) / 3.0 < options.brightness_threshold) ++tissue;
          for (std::size_t c = 0; c < 3; ++c) px[(dy * options.tile + dx) * 3 + c] = p[c];
        }
      const double fraction = static_cast<double>(tissue) / static_cast<double>(options.tile * options.tile);
      if (fraction >= options.min_tissue_fraction) tiles.push_back(Tile{y, x, fraction, Image(std::move(px))});
    }
  return tiles;
}

std::string_view to_string(Task t) { return t == Task::segmentation ? "segmentation" : "classification"; }

std::vector<StainDefinition> default_stains() {
  return {
      {"srcA", StainRole::source, {{0.60, 0.15, 0.45}, {0.96, 0.94, 0.96}, 1.0}, 0.80},
      {"tgtB", StainRole::target, {{0.20, 0.25, 0.60}, {0.95, 0.92, 0.82}, 1.3}, 0.78},
      {"tgtC", StainRole::target, {{0.45, 0.28, 0.15}, {0.80, 0.80, 0.80}, 0.8}, 0.70},
  };
}

StainSet stain_set_of(const std::vector<StainDefinition>& defs) {
  std::vector<StainId> ids;
  for (const auto& d : defs) ids.push_back({d.name, d.role});
  return StainSet(std::move(ids));
}

std::map<std::string, ParametricStain> stain_params_of(const std::vector<StainDefinition>& defs) {
  std::map<std::string, ParametricStain> out;
  for (const auto& d : defs) out[d.name] = d.params;
  return out;
}

Task parse_task(std::string_view s) {
  if (s == "segmentation") return Task::segmentation;
  if (s == "classification") return Task::classification;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected segmentation|classification)");
}

namespace {

std::string scene_stem(std::size_t idx) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", idx);
  return buf;
}

constexpr std::uint64_t kSceneStream = 17;

}  // namespace

Manifest make_benchmark(const BenchmarkSpec& spec, const StainSet& stains,
                        const std::map<std::string, ParametricStain>& params, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (stains.all().size() < 2) throw ConfigError("a benchmark needs at least two stains");
  for (const auto& s : stains.all())
    if (!params.contains(s.name)) throw ConfigError("no parametric definition for stain '" + s.name + "'");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create benchmark directory " + out_dir.string());

  const auto sources = stains.sources();
  const auto targets = stains.targets();
  const bool seg = spec.task == Task::segmentation;

  struct Job {
    std::size_t scene;
    Split split;
    bool labeled;
    std::vector<std::string> render_in;  // stains this scene is rendered in
  };
  std::vector<Job> jobs;
  std::size_t next = 0;
  auto add_labeled = [&](std::size_t n, Split split, bool with_targets) {
    for (std::size_t i = 0; i < n; ++i, ++next) {
      Job j{next, split, true, {sources[next % sources.size()]}};
      if (with_targets) j.render_in.insert(j.render_in.end(), targets.begin(), targets.end());
      jobs.push_back(std::move(j));
    }
  };
  add_labeled(spec.n_labeled_source, Split::train, false);
  add_labeled(spec.n_val, Split::val, false);
  add_labeled(spec.n_test, Split::test, true);
  for (const auto& s : stains.all())
    for (std::size_t i = 0; i < spec.n_unlabeled_per_stain; ++i, ++next) jobs.push_back(Job{next, Split::train, false, {s.name}});

  std::vector<std::vector<ManifestRecord>> produced(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t k) {
    const Job& job = jobs[k];
    Rng rng = Rng::stream(spec.seed, job.scene, kSceneStream);
    const Scene scene = generate_scene(spec.scene, rng);
    const std::string stem = scene_stem(job.scene);
    std::optional<std::string> mask_rel;
    if (job.labeled && seg) {
      mask_rel = "masks/" + stem + ".png";
      fs::create_directories(out_dir / "masks");
      write_png_gray(out_dir / *mask_rel, scene.mask);
    }
    for (const auto& stain : job.render_in) {
      const std::string sub = job.labeled ? std::string(to_string(job.split)) : "unlabeled";
      const std::string rel = "images/" + stain + "/" + sub + "/" + stem + ".png";
      fs::create_directories((out_dir / rel).parent_path());
      write_png(out_dir / rel, render_stain(scene.density, params.at(stain)));
      ManifestRecord r;
      r.image_path = rel;
      r.stain = stain;
      r.split = job.split;
      r.origin = Origin::real;
      r.patient_id = "scene-" + stem.substr(1);
      if (job.labeled) {
        if (seg)
          r.mask_path = mask_rel;
        else
          r.label = scene_label(scene);
      }
      produced[k].push_back(std::move(r));
    }
  });

  Manifest m;
  m.root = out_dir;
  for (auto& recs : produced)
    for (auto& r : recs) m.records.push_back(std::move(r));
  // Group target test copies after the source test records for readability.
  std::stable_sort(m.records.begin(), m.records.end(), [&](const ManifestRecord& a, const ManifestRecord& b) {
    auto rank = [&](const ManifestRecord& r) {
      if (!r.labeled()) return 3;
      return r.split == Split::test && stains.role(r.stain) == StainRole::target ? 2 : (r.split == Split::test ? 1 : 0);
    };
    return rank(a) < rank(b);
  });
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

Manifest subset_labels(const Manifest& m, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("label fraction must lie in (0, 1]");
  namespace fs = std::filesystem;
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (r.split == Split::train && r.labeled() && r.origin == Origin::real) labeled.push_back(i);
  }
  std::vector<std::size_t> order = labeled;
  Rng rng = Rng::stream(seed, 0x5AB5E7);
  rng.shuffle(order.begin(), order.end());
  const auto keep_n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(labeled.size()) - 1e-9));
  std::set<std::size_t> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(keep_n, order.size())));

  std::set<std::string> kept_paths, dropped_paths;
  for (std::size_t i : labeled) {
    const auto p = fs::absolute(m.resolve(m.records[i].image_path)).lexically_normal().string();
    (keep.contains(i) ? kept_paths : dropped_paths).insert(p);
  }

  Manifest out;
  out.root = m.root;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    const bool labeled_train = r.split == Split::train && r.labeled();
    if (labeled_train && r.origin == Origin::real && !keep.contains(i)) continue;
    if (labeled_train && r.origin == Origin::synthetic && r.derived_from) {
      const auto p = fs::absolute(m.resolve(*r.derived_from)).lexically_normal().string();
      if (dropped_paths.contains(p)) continue;
    }
    out.records.push_back(r);
  }
  return out;
}

}  // namespace ulsa
