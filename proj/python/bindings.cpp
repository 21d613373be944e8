#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ulsa/checkpoint.hpp"
#include "ulsa/config.hpp"
#include "ulsa/datagen.hpp"
#include "ulsa/error.hpp"
#include "ulsa/metrics.hpp"
#include "ulsa/model.hpp"
#include "ulsa/selftest.hpp"
#include "ulsa/stainnorm.hpp"

namespace py = pybind11;
using namespace ulsa;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

F64 to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F64 out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

Image to_image(const F64& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an (H, W, 3) array");
  return Image(to_tensor(a));
}

py::dict profile_dict(const StainProfile& p) {
  py::dict d;
  d["mean"] = p.mean;
  d["std"] = p.std;
  return d;
}

StainProfile profile_from(const py::dict& d) {
  StainProfile p;
  p.mean = d["mean"].cast<std::array<double, 3>>();
  p.std = d["std"].cast<std::array<double, 3>>();
  return p;
}

py::dict matrix_dict(const StainMatrix& m) {
  py::dict d;
  d["vectors"] = m.vectors;
  d["max_concentrations"] = m.max_concentrations;
  return d;
}

StainMatrix matrix_from(const py::dict& d) {
  StainMatrix m;
  m.vectors = d["vectors"].cast<std::array<std::array<double, 2>, 3>>();
  m.max_concentrations = d["max_concentrations"].cast<std::array<double, 2>>();
  return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Stain normalization, metrics, synthetic scenes and model inference";

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<Error>(m, "UlsaError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch", PyExc_ValueError);

  m.def("rgb_to_lab", [](const F64& img) { return to_array(rgb_to_lab(to_image(img))); }, py::arg("image"));
  m.def("lab_to_rgb", [](const F64& lab) { return to_array(lab_to_rgb(to_tensor(lab)).pixels()); }, py::arg("lab"));
  m.def("gaussian_blur", [](const F64& img, int kernel, double sigma) {
    return to_array(gaussian_blur(to_image(img), kernel, sigma).pixels());
  }, py::arg("image"), py::arg("kernel"), py::arg("sigma"));
  m.def("optical_density", &optical_density, py::arg("intensity"));

  m.def("reinhard_profile", [](const F64& img) { return profile_dict(profile_of(to_image(img))); }, py::arg("image"),
        "lab channel means and population stds as a dict");
  m.def("reinhard_transfer", [](const F64& img, const py::dict& ref) {
    return to_array(reinhard_transfer(to_image(img), profile_from(ref)).pixels());
  }, py::arg("image"), py::arg("reference"));

  m.def("macenko_fit", [](const F64& img, double alpha_pct, double beta) {
    MacenkoOptions o;
    o.alpha_pct = alpha_pct;
    o.beta = beta;
    return matrix_dict(macenko_fit(to_image(img), o));
  }, py::arg("image"), py::arg("alpha_pct") = 1.0, py::arg("beta") = 0.15);
  m.def("macenko_transfer", [](const F64& img, const py::dict& source, const py::dict& reference) {
    return to_array(macenko_transfer(to_image(img), matrix_from(source), matrix_from(reference)).pixels());
  }, py::arg("image"), py::arg("source"), py::arg("reference"));

  m.def("dice", [](const std::vector<int>& pred, const std::vector<int>& truth, std::size_t num_classes) {
    const DiceResult r = dice(pred, truth, num_classes);
    return py::make_tuple(r.macro, r.per_class, r.included);
  }, py::arg("pred"), py::arg("truth"), py::arg("num_classes"),
        "(macro mean, per-class scores, included flags) of flattened label maps");
  m.def("auroc", [](const std::vector<double>& scores, const std::vector<int>& labels) { return auroc(scores, labels); },
        py::arg("scores"), py::arg("labels"));

  m.def("generate_scene", [](std::uint64_t seed, std::size_t size) {
    SceneSpec spec;
    spec.height = spec.width = size;
    Rng rng(seed);
    const Scene s = generate_scene(spec, rng);
    py::array_t<std::uint8_t> mask({static_cast<py::ssize_t>(s.mask.height), static_cast<py::ssize_t>(s.mask.width)});
    std::copy(s.mask.values.begin(), s.mask.values.end(), mask.mutable_data());
    return py::make_tuple(to_array(s.density), mask);
  }, py::arg("seed"), py::arg("size") = 64, "(density, class mask) of one synthetic scene");

  m.def("predict", [](const std::filesystem::path& config, const std::filesystem::path& checkpoint, const F64& images) {
    if (images.ndim() != 4 || images.shape(3) != 3) throw py::value_error("expected an (N, H, W, 3) array");
    const RunConfig c = load_config(config);
    const std::size_t k = c.data.task == Task::segmentation ? kSceneClasses : 2;
    Model model(c.model, {c.data.task, k}, 0);
    model.load(load_checkpoint(checkpoint));
    const std::size_t n = images.shape(0), h = images.shape(1), w = images.shape(2);
    std::vector<Image> batch;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = images.data() + i * h * w * 3;
      batch.emplace_back(Tensor({h, w, 3}, std::vector<double>(p, p + h * w * 3)));
    }
    Tensor logits;
    {
      py::gil_scoped_release release;
      Tape tape;
      BoundModel bm(model, tape, false);
      logits = bm.predict(tape.constant(images_to_batch(batch))).value();
    }
    return to_array(logits);
  }, py::arg("config"), py::arg("checkpoint"), py::arg("images"),
        "logits of a trained checkpoint: (N, K, H, W) for segmentation, (N, 2) for classification");

  m.def("config_help", &config_help);
  m.def("resolved_config", [](const std::filesystem::path& path) { return to_ini(load_config(path)); }, py::arg("path"));

  m.def("selftest", [] {
    py::list out;
    for (const auto& r : run_selftest()) {
      py::dict d;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["detail"] = r.detail;
      d["seconds"] = r.seconds;
      out.append(d);
    }
    return out;
  });
}
