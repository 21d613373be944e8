#include "ulsa/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ulsa/error.hpp"
#include "ulsa/ops.hpp"
#include "ulsa/parallel.hpp"
#include "ulsa/stainnorm.hpp"

namespace ulsa {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::ulsa: return "ulsa";
    case Method::baseline: return "baseline";
    case Method::reinhard_norm: return "reinhard-norm";
    case Method::macenko_norm: return "macenko-norm";
    case Method::no_cgan: return "no_cgan";
    case Method::no_fcl: return "no_fcl";
    case Method::lb_fcl: return "lb_fcl";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (Method m : {Method::ulsa, Method::baseline, Method::reinhard_norm, Method::macenko_norm, Method::no_cgan,
                   Method::no_fcl, Method::lb_fcl})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + std::string(s) +
                    "' (expected ulsa, baseline, reinhard-norm, macenko-norm, no_cgan, no_fcl or lb_fcl)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(loss_weight >= 0.0)) fail("loss_weight must be >= 0");
  if (batch_labeled == 0) fail("batch_labeled must be positive");
  if (batch_labeled + batch_unlabeled != batch_total)
    fail("batch_labeled + batch_unlabeled (" + std::to_string(batch_labeled) + " + " + std::to_string(batch_unlabeled) +
         ") must equal batch_total (" + std::to_string(batch_total) + ")");
  if (uses_fcl() && batch_unlabeled == 0) fail("the consistency loss needs batch_unlabeled > 0");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(lr_floor > 0.0 && lr_floor <= lr)) fail("lr_floor must lie in (0, lr]");
  if (patience == 0 || plateau_patience == 0) fail("patience and plateau_patience must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (blur_kernel_choices.empty()) fail("blur_kernel_choices must not be empty");
  for (int k : blur_kernel_choices)
    if (k != 3 && k != 5) fail("blur kernels must be 3 or 5");
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) fail("need 0 < blur_sigma_min <= blur_sigma_max");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) fail("label_fraction must lie in (0, 1]");
}

TrainConfig apply_method(TrainConfig c, Method m) {
  c.method = m;
  switch (m) {
    case Method::ulsa: break;
    case Method::baseline:
    case Method::reinhard_norm:
    case Method::macenko_norm:
      c.translation_enabled = false;
      c.fcl_enabled = false;
      c.loss_weight = 0.0;
      break;
    case Method::no_cgan: c.translation_enabled = false; break;
    case Method::no_fcl:
      c.fcl_enabled = false;
      c.loss_weight = 0.0;
      break;
    case Method::lb_fcl: c.fcl_blocks = FclBlocks::last_only; break;
  }
  return c;
}

std::size_t DatasetBundle::source_labeled_count() const {
  std::size_t n = 0;
  for (const auto& s : source_stains)
    if (auto it = labeled.find(s); it != labeled.end()) n += it->second.size();
  return n;
}

namespace {

Image8 resize8(const Image8& img, std::size_t size) {
  if (img.height == size && img.width == size) return img;
  return quantize(resize_bilinear(dequantize(img), size, size));
}

std::vector<int> mask_targets(const Gray8& mask, std::size_t size, std::size_t num_classes, const std::string& where) {
  const Gray8 m = resize_nearest(mask, size, size);
  std::vector<int> out(m.values.begin(), m.values.end());
  for (int v : out)
    if (static_cast<std::size_t>(v) >= num_classes)
      throw Error(where + ": mask value " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
  return out;
}

LabeledSample load_labeled(const Manifest& m, const ManifestRecord& r, const BundleOptions& o) {
  LabeledSample s;
  s.stain = r.stain;
  s.stem = std::filesystem::path(r.image_path).stem().string();
  s.image = resize8(read_png_rgb(m.resolve(r.image_path)), o.image_size);
  if (o.task == Task::segmentation) {
    if (!r.mask_path) throw Error(r.image_path + ": segmentation record without mask_path");
    s.target = mask_targets(read_png_gray(m.resolve(*r.mask_path)), o.image_size, o.num_classes, *r.mask_path);
  } else {
    if (!r.label) throw Error(r.image_path + ": classification record without label");
    if (*r.label < 0 || static_cast<std::size_t>(*r.label) >= o.num_classes)
      throw Error(r.image_path + ": label " + std::to_string(*r.label) + " out of range");
    s.target = {*r.label};
  }
  return s;
}

}  // namespace

DatasetBundle load_bundle(const Manifest& manifest, const StainSet& stains, const BundleOptions& o,
                          const TranslatorRegistry* registry) {
  const Manifest m = o.label_fraction < 1.0 ? subset_labels(manifest, o.label_fraction, o.subset_seed) : manifest;
  DatasetBundle b;
  b.task = o.task;
  b.num_classes = o.num_classes;
  b.source_stains = stains.sources();
  b.target_stains = stains.targets();

  enum class Role { labeled_source, labeled_synthetic, unlabeled, val, skip };
  std::vector<Role> roles(m.records.size(), Role::skip);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (!stains.contains(r.stain)) continue;
    const bool source = stains.role(r.stain) == StainRole::source;
    if (r.split == Split::train) {
      if (!r.labeled())
        roles[i] = Role::unlabeled;
      else if (source && r.origin == Origin::real)
        roles[i] = Role::labeled_source;
      else if (!source && r.origin == Origin::synthetic && o.translation)
        roles[i] = Role::labeled_synthetic;
    } else if (r.split == Split::val && r.labeled() && source) {
      roles[i] = Role::val;
    }
  }

  std::vector<LabeledSample> labeled(m.records.size());
  std::vector<Image8> plain(m.records.size());
  parallel_for(m.records.size(), [&](std::size_t i) {
    if (roles[i] == Role::skip) return;
    if (roles[i] == Role::unlabeled)
      plain[i] = resize8(read_png_rgb(m.resolve(m.records[i].image_path)), o.image_size);
    else
      labeled[i] = load_labeled(m, m.records[i], o);
  });

  for (std::size_t i = 0; i < m.records.size(); ++i) {
    switch (roles[i]) {
      case Role::labeled_source:
      case Role::labeled_synthetic: b.labeled[m.records[i].stain].push_back(std::move(labeled[i])); break;
      case Role::unlabeled: b.unlabeled[m.records[i].stain].push_back(std::move(plain[i])); break;
      case Role::val: b.val.push_back(std::move(labeled[i])); break;
      case Role::skip: break;
    }
  }

  if (o.translation) {
    std::vector<const LabeledSample*> originals;
    for (const auto& s : b.source_stains)
      for (const auto& x : b.labeled[s]) originals.push_back(&x);
    for (const auto& t : b.target_stains) {
      if (!b.labeled[t].empty()) continue;
      if (registry == nullptr) throw MissingTranslator("no translator available to synthesize labeled '" + t + "' data");
      std::vector<LabeledSample> out(originals.size());
      parallel_for(originals.size(), [&](std::size_t i) {
        const LabeledSample& src = *originals[i];
        out[i].image = quantize(registry->translate(dequantize(src.image), src.stain, t, src.stem));
        out[i].target = src.target;
        out[i].stain = t;
        out[i].stem = src.stem;
      });
      b.labeled[t] = std::move(out);
    }
  }
  return b;
}

MixtureSampler::MixtureSampler(std::vector<std::pair<std::string, std::size_t>> pools) : pools_(std::move(pools)) {
  if (pools_.empty()) throw EmptyPool("mixture sampler has no pools");
  for (const auto& [name, n] : pools_)
    if (n == 0) throw EmptyPool("pool for stain '" + name + "' is empty");
}

MixtureSampler::Draw MixtureSampler::draw(Rng& rng) const {
  const std::size_t s = rng.index(pools_.size());
  return {s, rng.index(pools_[s].second)};
}

MixtureSampler labeled_sampler(const DatasetBundle& data, bool translation) {
  std::vector<std::pair<std::string, std::size_t>> pools;
  auto size_of = [&](const std::string& s) {
    auto it = data.labeled.find(s);
    return it == data.labeled.end() ? std::size_t{0} : it->second.size();
  };
  for (const auto& s : data.source_stains) pools.emplace_back(s, size_of(s));
  if (translation)
    for (const auto& t : data.target_stains) pools.emplace_back(t, size_of(t));
  return MixtureSampler(std::move(pools));
}

MixtureSampler unlabeled_sampler(const DatasetBundle& data) {
  std::vector<std::pair<std::string, std::size_t>> pools;
  for (const auto* group : {&data.source_stains, &data.target_stains})
    for (const auto& s : *group) {
      auto it = data.unlabeled.find(s);
      pools.emplace_back(s, it == data.unlabeled.end() ? 0 : it->second.size());
    }
  return MixtureSampler(std::move(pools));
}

LabeledBatch sample_labeled_batch(const MixtureSampler& sampler, const DatasetBundle& data, std::size_t n, Rng& rng) {
  LabeledBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = sampler.draw(rng);
    const LabeledSample& s = data.labeled.at(sampler.stain(d.stain))[d.index];
    b.images.push_back(dequantize(s.image));
    b.targets.insert(b.targets.end(), s.target.begin(), s.target.end());
    b.stains.push_back(sampler.stain(d.stain));
  }
  return b;
}

std::pair<Image, Image> make_unlabeled_pair(const Image& x1, std::span<const Image8* const> target_pool, Rng& rng,
                                            const BlurRange& blur) {
  if (target_pool.empty()) throw EmptyPool("unlabeled target pool is empty");
  const Image8& ref = *target_pool[rng.index(target_pool.size())];
  const int kernel = blur.kernels[rng.index(blur.kernels.size())];
  const double sigma = rng.uniform(blur.sigma_min, blur.sigma_max);
  Image tilde = gaussian_blur(reinhard_transfer(x1, profile_of(dequantize(ref))), kernel, sigma);
  return {x1, std::move(tilde)};
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history,
                       std::size_t num_blocks) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "kind,epoch,step,lr,total,supervised,unsupervised";
  for (std::size_t i = 1; i <= num_blocks; ++i) f << ",cos_" << i;
  f << ",val_loss\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : history) {
    f << (r.kind == HistoryRow::Kind::step ? "step" : "val") << ',' << r.epoch << ',' << r.step << ',' << num(r.lr);
    if (r.kind == HistoryRow::Kind::step) {
      f << ',' << num(r.loss.total) << ',' << num(r.loss.supervised) << ',' << num(r.loss.unsupervised);
      // Last-block-only runs fill the deepest column.
      const std::size_t offset = num_blocks - std::min(num_blocks, r.loss.per_block_cosine.size());
      for (std::size_t i = 0; i < num_blocks; ++i) {
        f << ',';
        if (!r.loss.per_block_cosine.empty() && i >= offset) f << num(r.loss.per_block_cosine[i - offset]);
      }
      f << ",\n";
    } else {
      f << ",,,";
      for (std::size_t i = 0; i < num_blocks; ++i) f << ',';
      f << ',' << num(r.val_loss) << '\n';
    }
  }
  if (!f) throw IoError("failed writing " + path.string());
}

double validation_loss(const Model& model, std::span<const LabeledSample> samples, Task task) {
  if (samples.empty()) throw EmptyPool("validation set is empty");
  constexpr std::size_t kChunk = 32;
  double acc = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    std::vector<Image> imgs;
    std::vector<int> tgt;
    for (std::size_t i = 0; i < n; ++i) {
      imgs.push_back(dequantize(samples[start + i].image));
      tgt.insert(tgt.end(), samples[start + i].target.begin(), samples[start + i].target.end());
    }
    Tape tape;
    BoundModel bm(model, tape, false);
    acc += supervised_loss(bm.predict(tape.constant(images_to_batch(imgs))), tgt, task).value().item() *
           static_cast<double>(n);
  }
  return acc / static_cast<double>(samples.size());
}

namespace {

constexpr double kImprovement = 1e-5;
constexpr std::uint64_t kLabeledStream = 1, kUnlabeledStream = 2, kLabeledSampleStream = 3,
                        kUnlabeledSampleStream = 1u << 20;

// Comparison methods: each labeled image is recoloured towards a random
// target-stain reference.
Image normalize_to_reference(const Image& img, const Image& ref, Method m, std::size_t& fallbacks) {
  if (m == Method::reinhard_norm) return reinhard_transfer(img, profile_of(ref));
  try {
    return macenko_transfer(img, macenko_fit(img), macenko_fit(ref));
  } catch (const InsufficientTissue&) {
  } catch (const DegenerateStains&) {
  }
  ++fallbacks;
  return img;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const EncoderConfig& encoder, const DatasetBundle& data,
                  const std::filesystem::path& out_dir) {
  cfg.validate();
  encoder.validate();
  const bool normalize = cfg.method == Method::reinhard_norm || cfg.method == Method::macenko_norm;
  const MixtureSampler lsampler = labeled_sampler(data, cfg.translation_enabled);
  std::optional<MixtureSampler> usampler;
  if (cfg.uses_fcl()) usampler.emplace(unlabeled_sampler(data));
  std::vector<const Image8*> target_pool;
  for (const auto& t : data.target_stains)
    if (auto it = data.unlabeled.find(t); it != data.unlabeled.end())
      for (const auto& img : it->second) target_pool.push_back(&img);
  if ((cfg.uses_fcl() || normalize) && target_pool.empty()) throw EmptyPool("unlabeled target pool is empty");
  if (data.val.empty()) throw EmptyPool("validation set is empty");

  TrainResult res{Model(encoder, {data.task, data.num_classes}, cfg.seed),
                  Model(encoder, {data.task, data.num_classes}, cfg.seed), {}, 0, 0, 0.0, 0};
  Model& model = res.last;
  AdamWState state;
  AdamWConfig opt{cfg.lr, cfg.weight_decay};
  const BlurRange blur{cfg.blur_kernel_choices, cfg.blur_sigma_min, cfg.blur_sigma_max};
  const std::size_t steps_per_epoch =
      (data.source_labeled_count() + cfg.batch_labeled - 1) / cfg.batch_labeled;
  if (steps_per_epoch == 0) throw EmptyPool("no labeled source data");

  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0, since_drop = 0, step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t k = 0; k < steps_per_epoch; ++k, ++step) {
      try {
        Rng lrng = Rng::stream(cfg.seed, step, kLabeledStream);
        LabeledBatch lb = sample_labeled_batch(lsampler, data, cfg.batch_labeled, lrng);
        if (normalize) {
          std::vector<std::size_t> fallbacks(lb.images.size(), 0);
          parallel_for(lb.images.size(), [&](std::size_t i) {
            Rng r = Rng::stream(cfg.seed, step, kLabeledSampleStream + i);
            const Image ref = dequantize(*target_pool[r.index(target_pool.size())]);
            lb.images[i] = normalize_to_reference(lb.images[i], ref, cfg.method, fallbacks[i]);
          });
          for (auto f : fallbacks) res.normalization_fallbacks += f;
        }

        Tape tape;
        BoundModel bm(model, tape);
        Var sup = supervised_loss(bm.predict(tape.constant(images_to_batch(lb.images))), lb.targets, data.task);
        std::optional<FclResult> unsup;
        if (usampler) {
          Rng urng = Rng::stream(cfg.seed, step, kUnlabeledStream);
          std::vector<const Image8*> picks;
          for (std::size_t i = 0; i < cfg.batch_unlabeled; ++i) {
            const auto d = usampler->draw(urng);
            picks.push_back(&data.unlabeled.at(usampler->stain(d.stain))[d.index]);
          }
          std::vector<Image> real(picks.size(), Image(1, 1)), aug(picks.size(), Image(1, 1));
          parallel_for(picks.size(), [&](std::size_t i) {
            Rng r = Rng::stream(cfg.seed, step, kUnlabeledSampleStream + i);
            auto pr = make_unlabeled_pair(dequantize(*picks[i]), target_pool, r, blur);
            real[i] = std::move(pr.first);
            aug[i] = std::move(pr.second);
          });
          unsup = fcl_loss(bm.encode(tape.constant(images_to_batch(real)), true),
                           bm.encode(tape.constant(images_to_batch(aug))), cfg.fcl_blocks);
        }
        TotalLoss tl = total_loss(sup, unsup ? &*unsup : nullptr, cfg.loss_weight);
        tape.backward(tl.loss);
        optimizer_step(model.params(), bm.gradients(), state, opt);
        res.history.push_back({HistoryRow::Kind::step, epoch, step, opt.lr, tl.report, 0.0});
      } catch (const NonFinite& e) {
        throw NonFinite("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " + e.what());
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " + e.what());
      }
    }

    const double val = validation_loss(model, data.val, data.task);
    res.history.push_back({HistoryRow::Kind::val, epoch, step, opt.lr, {}, val});
    res.epochs_run = epoch;
    if (val < best - kImprovement) {
      best = val;
      res.best = model;
      res.best_epoch = epoch;
      since_best = since_drop = 0;
    } else {
      ++since_best;
      if (++since_drop >= cfg.plateau_patience) {
        opt.lr = std::max(opt.lr * 0.1, cfg.lr_floor);
        since_drop = 0;
      }
    }
    spdlog::info("epoch {:3d}  val_loss {:.5f}  best {:.5f} (epoch {})  lr {:.1e}", epoch, val, best, res.best_epoch,
                 opt.lr);
    if (since_best >= cfg.patience) break;
  }
  res.best_val_loss = best;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_history_csv(out_dir / "history.csv", res.history, encoder.num_blocks);
    save_checkpoint(out_dir / "best.ckpt", res.best.params());
    save_checkpoint(out_dir / "final.ckpt", res.last.params());
  }
  return res;
}

}  // namespace ulsa
