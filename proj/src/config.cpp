#include "ulsa/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "ulsa/error.hpp"

namespace ulsa {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [end, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || end != last) throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

double parse_real(const std::string& key, const std::string& text) { return parse_number<double>(key, text); }
std::size_t parse_count(const std::string& key, const std::string& text) {
  if (!text.empty() && text[0] == '-') throw ConfigError(key + ": must not be negative");
  return parse_number<std::size_t>(key, text);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

Rgb parse_rgb(const std::string& key, const std::string& text) {
  const auto parts = split_list(text);
  if (parts.size() != 3) throw ConfigError(key + ": expected three comma-separated values, got '" + text + "'");
  return {parse_real(key, parts[0]), parse_real(key, parts[1]), parse_real(key, parts[2])};
}

std::string fmt_rgb(const Rgb& c) { return fmt_double(c[0]) + ", " + fmt_double(c[1]) + ", " + fmt_double(c[2]); }

std::string resolve_path(const fs::path& base, const std::string& text) {
  if (text.empty()) return {};
  const fs::path p(text);
  return (p.is_absolute() || base.empty() ? p : base / p).lexically_normal().string();
}

struct Key {
  const char* section;
  const char* name;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&, const fs::path&)> set;
};

#define ULSA_REAL(sec, field, member, doc)                                                              \
  Key {                                                                                                 \
    sec, field, doc, [](const RunConfig& c) { return fmt_double(c.member); },                          \
        [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) { c.member = parse_real(k, v); } \
  }
#define ULSA_COUNT(sec, field, member, doc)                                                             \
  Key {                                                                                                 \
    sec, field, doc, [](const RunConfig& c) { return std::to_string(c.member); },                      \
        [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) { c.member = parse_count(k, v); } \
  }

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      ULSA_COUNT("run", "seed", seed, "base seed; run i of --runs uses seed + i"),
      ULSA_COUNT("run", "runs", runs, "repeated runs for mean/std"),
      Key{"run", "method", "ulsa | baseline | reinhard-norm | macenko-norm | no_cgan | no_fcl | lb_fcl",
          [](const RunConfig& c) { return std::string(to_string(c.method)); },
          [](RunConfig& c, const std::string&, const std::string& v, const fs::path&) { c.method = parse_method(v); }},

      ULSA_REAL("train", "loss_weight", train.loss_weight, "weight of the feature consistency loss"),
      ULSA_COUNT("train", "batch_total", train.batch_total, "labeled + unlabeled images per step"),
      ULSA_COUNT("train", "batch_labeled", train.batch_labeled, "labeled images per step"),
      ULSA_COUNT("train", "batch_unlabeled", train.batch_unlabeled, "unlabeled images per step"),
      ULSA_REAL("train", "lr", train.lr, "AdamW learning rate"),
      ULSA_REAL("train", "weight_decay", train.weight_decay, "AdamW decoupled weight decay"),
      ULSA_REAL("train", "lr_floor", train.lr_floor, "lower bound of the plateau schedule"),
      ULSA_COUNT("train", "patience", train.patience, "epochs without validation improvement before stopping"),
      ULSA_COUNT("train", "plateau_patience", train.plateau_patience,
                 "epochs without improvement before the learning rate drops 10x"),
      ULSA_COUNT("train", "max_epochs", train.max_epochs, "hard epoch limit"),
      Key{"train", "blur_kernels", "Gaussian kernel sizes drawn for the augmented view (3 and/or 5)",
          [](const RunConfig& c) {
            std::string s;
            for (int k : c.train.blur_kernel_choices) s += (s.empty() ? "" : ", ") + std::to_string(k);
            return s;
          },
          [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.train.blur_kernel_choices.clear();
            for (const auto& p : split_list(v)) c.train.blur_kernel_choices.push_back(parse_number<int>(k, p));
          }},
      ULSA_REAL("train", "blur_sigma_min", train.blur_sigma_min, "lower end of the blur sigma range"),
      ULSA_REAL("train", "blur_sigma_max", train.blur_sigma_max, "upper end of the blur sigma range"),
      ULSA_REAL("train", "label_fraction", train.label_fraction, "fraction of labeled source images kept"),

      ULSA_COUNT("model", "num_blocks", model.num_blocks, "encoder blocks (each halves the resolution)"),
      ULSA_COUNT("model", "base_channels", model.base_channels, "channels of the first block, doubled per block"),
      ULSA_COUNT("model", "norm_groups", model.norm_groups, "group-norm groups (must divide base_channels)"),

      Key{"data", "task", "segmentation | classification",
          [](const RunConfig& c) { return std::string(to_string(c.data.task)); },
          [](RunConfig& c, const std::string&, const std::string& v, const fs::path&) { c.data.task = parse_task(v); }},
      ULSA_COUNT("data", "image_size", data.image_size, "training/evaluation resolution (images are resized)"),
      Key{"data", "manifest", "benchmark manifest (relative to this file)",
          [](const RunConfig& c) { return c.data.manifest.string(); },
          [](RunConfig& c, const std::string&, const std::string& v, const fs::path& base) {
            c.data.manifest = resolve_path(base, v);
          }},
      Key{"data", "translator", "parametric | files",
          [](const RunConfig& c) { return c.data.translator; },
          [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            if (v != "parametric" && v != "files") throw ConfigError(k + ": expected parametric or files, got '" + v + "'");
            c.data.translator = v;
          }},
      Key{"data", "translations_dir", "root of <src>_to_<dst>/<stem>.png translations (translator = files)",
          [](const RunConfig& c) { return c.data.translations_dir.string(); },
          [](RunConfig& c, const std::string&, const std::string& v, const fs::path& base) {
            c.data.translations_dir = resolve_path(base, v);
          }},
      ULSA_COUNT("data", "n_labeled_source", data.n_labeled_source, "generate: labeled source train scenes"),
      ULSA_COUNT("data", "n_val", data.n_val, "generate: validation scenes"),
      ULSA_COUNT("data", "n_test", data.n_test, "generate: test scenes (rendered in every stain)"),
      ULSA_COUNT("data", "n_unlabeled_per_stain", data.n_unlabeled_per_stain, "generate: unlabeled scenes per stain"),
      ULSA_COUNT("data", "generate_seed", data.generate_seed, "generate: scene seed"),
      ULSA_COUNT("data", "subset_seed", data.subset_seed, "seed of the labeled-subset permutation"),
  };
  return keys;
}

#undef ULSA_REAL
#undef ULSA_COUNT

struct StainKey {
  const char* name;
  const char* help;
  std::function<std::string(const StainDefinition&)> get;
  std::function<void(StainDefinition&, const std::string&, const std::string&)> set;
};

const std::vector<StainKey>& stain_schema() {
  static const std::vector<StainKey> keys = {
      {"role", "source | target", [](const StainDefinition& s) { return std::string(s.role == StainRole::source ? "source" : "target"); },
       [](StainDefinition& s, const std::string& k, const std::string& v) {
         if (v == "source")
           s.role = StainRole::source;
         else if (v == "target")
           s.role = StainRole::target;
         else
           throw ConfigError(k + ": expected source or target, got '" + v + "'");
       }},
      {"dark", "RGB of full stain density", [](const StainDefinition& s) { return fmt_rgb(s.params.dark); },
       [](StainDefinition& s, const std::string& k, const std::string& v) { s.params.dark = parse_rgb(k, v); }},
      {"light", "RGB of empty background", [](const StainDefinition& s) { return fmt_rgb(s.params.light); },
       [](StainDefinition& s, const std::string& k, const std::string& v) { s.params.light = parse_rgb(k, v); }},
      {"gamma", "density exponent in [0.5, 2]", [](const StainDefinition& s) { return fmt_double(s.params.gamma); },
       [](StainDefinition& s, const std::string& k, const std::string& v) { s.params.gamma = parse_real(k, v); }},
      {"tissue_threshold", "mean RGB below which a pixel counts as tissue",
       [](const StainDefinition& s) { return fmt_double(s.tissue_threshold); },
       [](StainDefinition& s, const std::string& k, const std::string& v) { s.tissue_threshold = parse_real(k, v); }},
  };
  return keys;
}

}  // namespace

void RunConfig::validate() const {
  if (runs == 0) throw ConfigError("run.runs must be positive");
  train.validate();
  model.validate();
  model.check_input(data.image_size, data.image_size);
  if (data.translator == "files" && data.translations_dir.empty())
    throw ConfigError("data.translator = files needs data.translations_dir");
  for (const auto& s : stains) {
    try {
      s.params.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("stain." + s.name + ": " + e.what());
    }
  }
  (void)stain_set();
}

TrainConfig RunConfig::resolved_train(std::uint64_t run_seed) const {
  TrainConfig t = apply_method(train, method);
  t.seed = run_seed;
  return t;
}

BenchmarkSpec RunConfig::benchmark_spec() const {
  BenchmarkSpec b;
  b.task = data.task;
  b.n_labeled_source = data.n_labeled_source;
  b.n_val = data.n_val;
  b.n_test = data.n_test;
  b.n_unlabeled_per_stain = data.n_unlabeled_per_stain;
  b.scene.height = b.scene.width = data.image_size;
  b.seed = data.generate_seed;
  return b;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  bool custom_stains = false;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' outside of a section");
    if (section.rfind("stain.", 0) == 0) {
      const std::string name = section.substr(6);
      if (name.empty()) throw ConfigError("[stain.] section without a stain name");
      if (!custom_stains) c.stains.clear();
      custom_stains = true;
      StainDefinition def;
      def.name = name;
      bool have_role = false, have_dark = false, have_light = false;
      for (const auto& [key, value] : body) {
        const std::string full = section + "." + key;
        auto it = std::find_if(stain_schema().begin(), stain_schema().end(),
                               [&](const StainKey& k) { return key == k.name; });
        if (it == stain_schema().end()) throw ConfigError("unknown key '" + full + "'");
        it->set(def, full, value.data());
        have_role |= key == "role";
        have_dark |= key == "dark";
        have_light |= key == "light";
      }
      if (!have_role || !have_dark || !have_light)
        throw ConfigError("[" + section + "] needs role, dark and light");
      c.stains.push_back(def);
      continue;
    }
    bool known_section = false;
    for (const auto& k : schema()) known_section |= section == k.section;
    if (!known_section) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      auto it = std::find_if(schema().begin(), schema().end(),
                             [&](const Key& k) { return section == k.section && key == k.name; });
      if (it == schema().end()) throw ConfigError("unknown key '" + full + "'");
      it->set(c, full, value.data(), base_dir);
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream out;
  std::string section;
  for (const auto& k : schema()) {
    if (section != k.section) {
      section = k.section;
      out << (out.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
    }
    out << k.name << " = " << k.get(c) << '\n';
  }
  for (const auto& s : c.stains) {
    out << "\n[stain." << s.name << "]\n";
    for (const auto& k : stain_schema()) out << k.name << " = " << k.get(s) << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  for (const auto& k : schema()) j[k.section][k.name] = k.get(c);
  for (const auto& s : c.stains)
    for (const auto& k : stain_schema()) j["stain." + s.name][k.name] = k.get(s);
  return j;
}

std::string config_help() {
  const RunConfig defaults;
  std::ostringstream out;
  out << "Config file keys (INI; unknown keys are errors):\n";
  std::string section;
  for (const auto& k : schema()) {
    if (section != k.section) {
      section = k.section;
      out << "  [" << section << "]\n";
    }
    out << "    " << k.name << " = " << k.get(defaults) << "\n        " << k.help << '\n';
  }
  out << "  [stain.<name>]  (any stain section replaces the default stains "
      << "srcA, tgtB, tgtC)\n";
  const StainDefinition example = default_stains().front();
  for (const auto& k : stain_schema())
    out << "    " << k.name << " = " << k.get(example) << "\n        " << k.help << '\n';
  return out.str();
}

}  // namespace ulsa
