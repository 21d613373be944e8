// Command-line front end: benchmark generation, stain translation and
// normalization, training, evaluation and the experiment sweeps.

#include <fcntl.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "json.hpp"
#include "ulsa/config.hpp"
#include "ulsa/error.hpp"
#include "ulsa/experiment.hpp"
#include "ulsa/selftest.hpp"
#include "ulsa/stainnorm.hpp"

namespace fs = std::filesystem;
using namespace ulsa;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::string out;
  std::string manifest;
};

RunConfig resolve(const Common& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.runs) c.runs = *o.runs;
  if (!o.manifest.empty()) c.data.manifest = o.manifest;
  c.validate();
  return c;
}

Manifest require_manifest(const RunConfig& c) {
  if (c.data.manifest.empty()) throw ConfigError("no manifest: set data.manifest or pass --manifest");
  if (!fs::exists(c.data.manifest)) throw ConfigError("manifest " + c.data.manifest.string() + " does not exist");
  return read_manifest(c.data.manifest);
}

/// Exclusive marker file in a run directory, removed on scope exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".ulsa.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error(dir.string() + " is in use by another ulsa process (delete " + path_.string() +
                  " if that process is gone)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--fractions: cannot parse '" + item + "'");
    }
  }
  return out;
}

void print_report(const EvalReport& r, const std::string& title) { std::cout << render_report_table(r, title); }

int cmd_generate(const Common& o) {
  RunConfig c = resolve(o);
  if (o.seed) c.data.generate_seed = *o.seed;
  const fs::path out(o.out);
  DirLock lock(out);
  const Manifest m = make_benchmark(c.benchmark_spec(), c.stain_set(), stain_params_of(c.stains), out);
  const auto issues = validate_manifest(m, true);
  for (const auto& i : issues) spdlog::error("manifest record {}: {}", i.line, i.message);
  if (!issues.empty()) throw Error("generated manifest failed validation");
  write_file(out / "config.ini", to_ini(c));
  std::cout << "wrote " << m.records.size() << " records to " << (out / "manifest.jsonl").string() << '\n';
  return 0;
}

int cmd_translate(const Common& o, const std::vector<std::string>& targets) {
  const RunConfig c = resolve(o);
  const Manifest in = require_manifest(c);
  const StainSet stains = c.stain_set();
  const TranslatorRegistry reg = make_registry(c);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest sources{in.root, {}};
  for (const auto& r : in.records)
    if (stains.contains(r.stain) && stains.role(r.stain) == StainRole::source && r.split == Split::train &&
        r.labeled() && r.origin == Origin::real)
      sources.records.push_back(r);
  Manifest merged = in;
  std::size_t failed = 0;
  for (const auto& dst : targets.empty() ? stains.targets() : targets) {
    if (!stains.contains(dst)) throw ConfigError("unknown stain '" + dst + "'");
    BatchTranslateResult res = batch_translate(sources, dst, reg, out);
    for (const auto& e : res.errors) spdlog::error("{}", e);
    failed += res.failed;
    for (auto& r : res.manifest.records) {
      r.image_path = res.manifest.resolve(r.image_path).string();
      if (r.mask_path) r.mask_path = res.manifest.resolve(*r.mask_path).string();
      merged.records.push_back(std::move(r));
    }
    std::cout << dst << ": " << res.manifest.records.size() << " translated, " << res.failed << " failed\n";
  }
  for (auto& r : merged.records) {
    if (fs::path(r.image_path).is_relative()) r.image_path = in.resolve(r.image_path).string();
    if (r.mask_path && fs::path(*r.mask_path).is_relative()) r.mask_path = in.resolve(*r.mask_path).string();
    if (r.derived_from && fs::path(*r.derived_from).is_relative()) r.derived_from = in.resolve(*r.derived_from).string();
  }
  merged.root = out;
  for (auto& r : merged.records) {
    r.image_path = fs::path(r.image_path).lexically_relative(out).string();
    if (r.mask_path) r.mask_path = fs::path(*r.mask_path).lexically_relative(out).string();
    if (r.derived_from) r.derived_from = fs::path(*r.derived_from).lexically_relative(out).string();
  }
  write_manifest(out / "manifest.jsonl", merged);
  if (failed > 0) throw Error(std::to_string(failed) + " record(s) could not be translated");
  return 0;
}

int cmd_fit_reference(const Common& o, const std::string& image) {
  (void)resolve(o);
  const Image img = read_png(image);
  nlohmann::json j;
  j["image"] = image;
  j["reinhard"] = profile_of(img);
  try {
    j["macenko"] = macenko_fit(img);
  } catch (const Error& e) {
    spdlog::warn("no Macenko basis for {}: {}", image, e.what());
    j["macenko"] = nullptr;
    j["macenko_error"] = e.what();
  }
  const std::string text = j.dump(2) + "\n";
  if (o.out.empty())
    std::cout << text;
  else
    write_file(o.out, text);
  return 0;
}

int cmd_normalize(const Common& o, const std::string& reference, const std::string& method,
                  const std::vector<std::string>& only) {
  const RunConfig c = resolve(o);
  const Manifest in = require_manifest(c);
  std::ifstream rf(reference);
  if (!rf) throw ConfigError("cannot read reference " + reference);
  const nlohmann::json ref = nlohmann::json::parse(rf);
  if (method != "reinhard" && method != "macenko") throw ConfigError("--method must be reinhard or macenko");
  if (method == "macenko" && ref.at("macenko").is_null()) throw ConfigError("reference has no Macenko basis");
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest result{out, {}};
  std::size_t fallbacks = 0;
  for (const auto& r : in.records) {
    if (!only.empty() && std::find(only.begin(), only.end(), r.stain) == only.end()) continue;
    const Image img = read_png(in.resolve(r.image_path));
    Image norm = img;
    if (method == "reinhard") {
      norm = reinhard_transfer(img, ref.at("reinhard").get<StainProfile>());
    } else {
      try {
        norm = macenko_transfer(img, macenko_fit(img), ref.at("macenko").get<StainMatrix>());
      } catch (const Error& e) {
        ++fallbacks;
        spdlog::warn("{}: left unnormalized ({})", r.image_path, e.what());
      }
    }
    const fs::path rel = fs::path(r.stain) / (fs::path(r.image_path).stem().string() + ".png");
    fs::create_directories(out / rel.parent_path());
    write_png(out / rel, norm);
    ManifestRecord nr = r;
    nr.image_path = rel.string();
    if (nr.mask_path) nr.mask_path = fs::path(in.resolve(*nr.mask_path)).lexically_relative(out).string();
    result.records.push_back(std::move(nr));
  }
  write_manifest(out / "manifest.jsonl", result);
  std::cout << "normalized " << result.records.size() << " images (" << fallbacks << " left unnormalized)\n";
  return 0;
}

int cmd_train(const Common& o) {
  const RunConfig c = resolve(o);
  const Manifest m = require_manifest(c);
  const fs::path out(o.out);
  DirLock lock(out);
  const DatasetBundle data = load_training_data(c, m, c.train.label_fraction);
  write_file(out / "config.ini", to_ini(c));
  for (const auto& r : train_runs(c, data, out))
    std::cout << r.dir.string() << (r.trained ? " trained" : " reused") << " (seed " << r.seed << ")\n";
  return 0;
}

int cmd_evaluate(const Common& o, const std::string& runs_dir) {
  const RunConfig c = resolve(o);
  const Manifest m = require_manifest(c);
  const fs::path dir(runs_dir);
  const fs::path out = o.out.empty() ? dir / "eval" : fs::path(o.out);
  DirLock lock(out);
  if (fs::exists(dir / "run_0")) {
    const EvalReport r = evaluate_checkpoints(c, m, find_checkpoints(dir), out, dir.filename().string());
    print_report(r, dir.filename().string());
    return 0;
  }
  // A sweep or ablation directory: one evaluation per variant plus a chart.
  std::vector<fs::path> variants;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "run_0")) variants.push_back(e.path());
  if (variants.empty()) throw ConfigError(dir.string() + " holds neither run_<i> nor variant directories");
  std::sort(variants.begin(), variants.end());
  const bool sweep = std::all_of(variants.begin(), variants.end(),
                                 [](const fs::path& p) { return p.filename().string().rfind("frac_", 0) == 0; });
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const auto& v : variants) {
    const std::string name = v.filename().string();
    reports.emplace_back(name, evaluate_checkpoints(c, m, find_checkpoints(v), out / name, name));
    print_report(reports.back().second, name);
  }
  const std::string ylabel = c.data.task == Task::segmentation ? "Dice (%)" : "AUROC (%)";
  if (sweep) {
    std::sort(reports.begin(), reports.end(),
              [](const auto& a, const auto& b) { return std::stod(a.first.substr(5)) < std::stod(b.first.substr(5)); });
    ChartSeries target{"target (overall)", {}, {}}, source{"source", {}, {}};
    for (const auto& [name, r] : reports) {
      const double f = 100.0 * std::stod(name.substr(5));
      target.x.push_back(f);
      target.y.push_back(100.0 * r.overall_mean);
      source.x.push_back(f);
      source.y.push_back(100.0 * r.source_mean());
    }
    write_line_chart_svg(out / "sweep.svg", "Label fraction sweep", "labeled source data (%)", ylabel, {target, source});
  } else {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [name, r] : reports) bars.emplace_back(name, 100.0 * r.overall_mean);
    write_bar_chart_svg(out / "variants.svg", "Target stains (overall)", ylabel, bars);
  }
  return 0;
}

int cmd_sweep(const Common& o, const std::string& fractions) {
  const RunConfig c = resolve(o);
  const Manifest m = require_manifest(c);
  const fs::path out(o.out);
  DirLock lock(out);
  write_file(out / "config.ini", to_ini(c));
  for (const auto& p : sweep_labels(c, m, parse_fractions(fractions), out))
    print_report(p.report, fraction_dir(p.fraction) + " (" + std::to_string(p.labeled) + " labeled)");
  return 0;
}

int cmd_ablate(const Common& o) {
  const RunConfig c = resolve(o);
  const Manifest m = require_manifest(c);
  const fs::path out(o.out);
  DirLock lock(out);
  write_file(out / "config.ini", to_ini(c));
  for (const auto& row : ablate(c, m, out)) print_report(row.report, std::string(to_string(row.method)));
  return 0;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& r : run_selftest()) {
    std::printf("%s  %-18s %6.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    ok &= r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("ulsa"));
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  CLI::App app{"Semi-supervised stain adaptation for histopathology segmentation and classification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", build_git_hash());
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")->capture_default_str();

  Common o;
  const std::string keys = "\n" + config_help();
  auto add_common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--config", o.config, "INI run config (defaults apply to missing keys)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "overrides run.seed (data.generate_seed for generate)");
    auto* out = sub->add_option("--out", o.out, "output directory");
    if (out_required) out->required();
    sub->footer(keys);
  };
  auto with_runs = [&](CLI::App* sub) {
    sub->add_option("--runs", o.runs, "repeated runs with seeds seed+i (overrides run.runs, default 3)");
    sub->add_option("--manifest", o.manifest, "overrides data.manifest");
  };

  auto* gen = app.add_subcommand("generate", "write the synthetic multi-stain benchmark");
  add_common(gen, true);

  std::vector<std::string> to;
  auto* tr = app.add_subcommand("translate", "translate labeled source train images into target stains");
  add_common(tr, true);
  tr->add_option("--manifest", o.manifest, "overrides data.manifest");
  tr->add_option("--to", to, "target stain(s); default: every target stain");

  std::string image;
  auto* fit = app.add_subcommand("fit-reference", "fit Reinhard and Macenko references to one image (JSON)");
  add_common(fit, false);
  fit->add_option("--image", image, "reference PNG")->required()->check(CLI::ExistingFile);

  std::string reference, method = "reinhard";
  std::vector<std::string> only;
  auto* norm = app.add_subcommand("normalize", "normalize every image of a manifest towards a reference");
  add_common(norm, true);
  norm->add_option("--manifest", o.manifest, "overrides data.manifest");
  norm->add_option("--reference", reference, "JSON written by fit-reference")->required()->check(CLI::ExistingFile);
  norm->add_option("--method", method, "reinhard or macenko")->capture_default_str();
  norm->add_option("--stain", only, "restrict to these stains");

  auto* train = app.add_subcommand("train", "train run.runs models into <out>/run_<i>");
  add_common(train, true);
  with_runs(train);

  std::string runs_dir;
  auto* eval = app.add_subcommand("evaluate", "evaluate trained runs (or a sweep/ablation directory)");
  add_common(eval, false);
  eval->add_option("--manifest", o.manifest, "overrides data.manifest");
  eval->add_option("--runs-dir", runs_dir, "output directory of train, sweep-labels or ablate")
      ->required()
      ->check(CLI::ExistingDirectory);

  std::string fractions = "0.1,0.25,0.5,1.0";
  auto* sweep = app.add_subcommand("sweep-labels", "train and evaluate at several labeled fractions");
  add_common(sweep, true);
  with_runs(sweep);
  sweep->add_option("--fractions", fractions, "comma-separated fractions in (0, 1]")->capture_default_str();

  auto* abl = app.add_subcommand("ablate", "train and evaluate ulsa, no_cgan, no_fcl and lb_fcl");
  add_common(abl, true);
  with_runs(abl);

  auto* self = app.add_subcommand("selftest", "run the gradient, normalizer, metric and sampler checks");

  auto* show = app.add_subcommand("show-config", "print the resolved config as INI");
  add_common(show, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (tr->parsed()) return cmd_translate(o, to);
    if (fit->parsed()) return cmd_fit_reference(o, image);
    if (norm->parsed()) return cmd_normalize(o, reference, method, only);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_evaluate(o, runs_dir);
    if (sweep->parsed()) return cmd_sweep(o, fractions);
    if (abl->parsed()) return cmd_ablate(o);
    if (self->parsed()) return cmd_selftest();
    if (show->parsed()) {
      std::cout << to_ini(resolve(o));
      return 0;
    }
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
