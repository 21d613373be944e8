#include "ulsa/model.hpp"

#include <cmath>
#include <stdexcept>

#include "ulsa/error.hpp"
#include "ulsa/ops.hpp"
#include "ulsa/rng.hpp"

namespace ulsa {

void EncoderConfig::validate() const {
  if (num_blocks < 2) throw ConfigError("encoder needs at least 2 blocks");
  if (base_channels == 0 || norm_groups == 0 || base_channels % norm_groups != 0)
    throw ConfigError("norm_groups must divide base_channels");
}

void EncoderConfig::check_input(std::size_t h, std::size_t w) const {
  const std::size_t f = std::size_t{1} << num_blocks;
  if (h % f != 0 || w % f != 0)
    throw ShapeMismatch("input " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 2^" +
                        std::to_string(num_blocks));
}

namespace {

std::string enc(std::size_t i, const char* part) { return "enc" + std::to_string(i + 1) + "." + part; }
std::string dec(std::size_t j, const char* part) { return "dec" + std::to_string(j) + "." + part; }

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = sd * rng.normal();
  return t;
}

}  // namespace

Model::Model(EncoderConfig encoder, TaskHead head, std::uint64_t seed) : encoder_(encoder), head_(head) {
  encoder_.validate();
  if (head_.num_classes < 2) throw ConfigError("task head needs at least 2 classes");
  Rng rng(seed);
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    params_.push_back({name, he_normal({out, in, k, k}, in * k * k, rng)});
  };
  auto norm = [&](const std::string& prefix, std::size_t c) {
    params_.push_back({prefix + ".g", Tensor({c}, 1.0)});
    params_.push_back({prefix + ".b", Tensor({c}, 0.0)});
  };
  std::size_t in = 3;
  for (std::size_t i = 0; i < encoder_.num_blocks; ++i) {
    const std::size_t c = encoder_.channels(i);
    conv(enc(i, "conv1.w"), c, in, 3);
    norm(enc(i, "gn1"), c);
    conv(enc(i, "conv2.w"), c, c, 3);
    norm(enc(i, "gn2"), c);
    conv(enc(i, "skip.w"), c, in, 1);
    in = c;
  }
  const std::size_t k = head_.num_classes;
  if (head_.kind == Task::classification) {
    const std::size_t c = encoder_.channels(encoder_.num_blocks - 1);
    params_.push_back({"head.w", he_normal({c, k}, c, rng)});
    params_.push_back({"head.b", Tensor({k}, 0.0)});
  } else {
    for (std::size_t j = encoder_.num_blocks - 1; j >= 1; --j) {
      const std::size_t c = encoder_.channels(j - 1), below = encoder_.channels(j);
      conv(dec(j, "conv.w"), c, c + below, 3);
      norm(dec(j, "gn"), c);
    }
    const std::size_t c1 = encoder_.channels(0);
    conv(dec(0, "conv.w"), c1, c1, 3);
    norm(dec(0, "gn"), c1);
    conv("head.w", k, c1, 1);
    params_.push_back({"head.b", Tensor({k}, 0.0)});
  }
}

std::size_t Model::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw Error("model has no parameter '" + name + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

std::size_t Model::parameter_count(const EncoderConfig& e, const TaskHead& head) {
  std::size_t n = 0, prev = 3;
  for (std::size_t i = 0; i < e.num_blocks; ++i) {
    const std::size_t c = e.channels(i);
    n += 9 * c * prev + 9 * c * c + c * prev + 4 * c;
    prev = c;
  }
  const std::size_t k = head.num_classes;
  if (head.kind == Task::classification) return n + k * prev + k;
  for (std::size_t j = 1; j < e.num_blocks; ++j) {
    const std::size_t c = e.channels(j - 1);
    n += 9 * c * (c + e.channels(j)) + 2 * c;
  }
  const std::size_t c1 = e.channels(0);
  return n + 9 * c1 * c1 + 2 * c1 + k * c1 + k;
}

void Model::load(std::span<const NamedTensor> tensors) {
  if (tensors.size() != params_.size())
    throw Error("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                std::to_string(params_.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != params_[i].name) throw Error("checkpoint tensor '" + tensors[i].name + "' where '" + params_[i].name + "' expected");
    if (tensors[i].tensor.shape() != params_[i].tensor.shape())
      throw ShapeMismatch("checkpoint tensor " + tensors[i].name + " has shape " + shape_str(tensors[i].tensor.shape()) +
                          ", model expects " + shape_str(params_[i].tensor.shape()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) params_[i].tensor = tensors[i].tensor;
}

BoundModel::BoundModel(const Model& model, std::vector<Var> params) : model_(&model), live_(std::move(params)) {
  if (live_.size() != model.params().size()) throw ShapeMismatch("BoundModel: parameter count mismatch");
  for (std::size_t i = 0; i < live_.size(); ++i)
    if (live_[i].shape() != model.params()[i].tensor.shape())
      throw ShapeMismatch("BoundModel: " + model.params()[i].name + " expects " + shape_str(model.params()[i].tensor.shape()) +
                          ", got " + shape_str(live_[i].shape()));
}

BoundModel::BoundModel(const Model& model, Tape& tape, bool trainable) : model_(&model) {
  live_.reserve(model.params().size());
  for (const auto& p : model.params()) live_.push_back(trainable ? tape.leaf(p.tensor) : tape.constant(p.tensor));
}

Var BoundModel::param(const std::string& name) const { return live_[model_->index_of(name)]; }

Var BoundModel::p(const std::string& name, bool frozen) const {
  const std::size_t i = model_->index_of(name);
  if (!frozen) return live_[i];
  if (frozen_.empty()) {
    frozen_.reserve(live_.size());
    for (const auto& v : live_) frozen_.push_back(v.requires_grad() ? ops::detach(v) : v);
  }
  return frozen_[i];
}

Var BoundModel::conv_gn_relu(Var x, const std::string& prefix, std::size_t stride, bool frozen) const {
  Var y = ops::conv2d(x, p(prefix + ".conv.w", frozen), stride, 1);
  return ops::relu(ops::group_norm(y, p(prefix + ".gn.g", frozen), p(prefix + ".gn.b", frozen), model_->encoder().norm_groups));
}

FeaturePyramid BoundModel::encode(Var x, bool detached) const {
  const auto& e = model_->encoder();
  if (x.shape().size() != 4 || x.shape()[1] != 3)
    throw ShapeMismatch("encode: expected (B, 3, H, W) input, got " + shape_str(x.shape()));
  e.check_input(x.shape()[2], x.shape()[3]);
  if (detached) x = ops::detach(x);
  FeaturePyramid out;
  for (std::size_t i = 0; i < e.num_blocks; ++i) {
    Var h = ops::conv2d(x, p(enc(i, "conv1.w"), detached), 2, 1);
    h = ops::relu(ops::group_norm(h, p(enc(i, "gn1.g"), detached), p(enc(i, "gn1.b"), detached), e.norm_groups));
    h = ops::conv2d(h, p(enc(i, "conv2.w"), detached), 1, 1);
    h = ops::group_norm(h, p(enc(i, "gn2.g"), detached), p(enc(i, "gn2.b"), detached), e.norm_groups);
    Var skip = ops::conv2d(x, p(enc(i, "skip.w"), detached), 2, 0);
    x = ops::relu(ops::add(h, skip));
    out.maps.push_back(detached ? ops::detach(x) : x);
    out.pooled.push_back(ops::adaptive_avg_pool(out.maps.back()));
  }
  return out;
}

Var BoundModel::predict_class(Var x) const {
  if (model_->head().kind != Task::classification) throw Error("predict_class on a segmentation model");
  const FeaturePyramid f = encode(x);
  return ops::add_bias(ops::matmul(f.pooled.back(), param("head.w")), param("head.b"));
}

Var BoundModel::predict_mask(Var x) const {
  if (model_->head().kind != Task::segmentation) throw Error("predict_mask on a classification model");
  const FeaturePyramid f = encode(x);
  const std::size_t b = model_->encoder().num_blocks;
  Var d = f.maps[b - 1];
  for (std::size_t j = b - 1; j >= 1; --j)
    d = conv_gn_relu(ops::concat_channels(ops::upsample2x(d), f.maps[j - 1]), "dec" + std::to_string(j), 1, false);
  d = conv_gn_relu(ops::upsample2x(d), "dec0", 1, false);
  return ops::add_bias(ops::conv2d(d, param("head.w"), 1, 0), param("head.b"));
}

Var BoundModel::predict(Var x) const {
  return model_->head().kind == Task::classification ? predict_class(x) : predict_mask(x);
}

std::vector<Tensor> BoundModel::gradients() const {
  std::vector<Tensor> g;
  g.reserve(live_.size());
  for (const auto& v : live_) g.push_back(v.grad());
  return g;
}

Tensor images_to_batch(std::span<const Image> images) {
  if (images.empty()) throw ShapeMismatch("images_to_batch: empty batch");
  const std::size_t h = images[0].height(), w = images[0].width();
  std::vector<double> data;
  data.reserve(images.size() * 3 * h * w);
  for (const auto& img : images) {
    if (img.height() != h || img.width() != w) throw ShapeMismatch("images_to_batch: images differ in size");
    append_chw(img, data);
  }
  return Tensor({images.size(), 3, h, w}, std::move(data));
}

}  // namespace ulsa
