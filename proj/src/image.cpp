#include "ulsa/image.hpp"

#include <algorithm>
#include <cmath>
#include <png.h>
#include <stdexcept>

#include "ulsa/error.hpp"

namespace ulsa {

Image::Image(std::size_t height, std::size_t width) : pixels_({height, width, 3}, 0.0) {}

Image::Image(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3 || pixels_.dim(2) != 3)
    throw std::invalid_argument("image tensor must be (H, W, 3), got " + shape_str(pixels_.shape()));
  for (double v : pixels_.data())
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image value outside [0, 1]");
}

Image Image::clamped(Tensor pixels) {
  for (auto& v : pixels.vec()) v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
  return Image(std::move(pixels));
}

Image Image::filled(std::size_t height, std::size_t width, const Rgb& color) {
  Image img(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) img.set_pixel(y, x, color);
  return img;
}

void Image::set(std::size_t y, std::size_t x, std::size_t c, double v) {
  pixels_[(y * width() + x) * 3 + c] = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
}

Rgb Image::pixel(std::size_t y, std::size_t x) const {
  const std::size_t o = (y * width() + x) * 3;
  return {pixels_[o], pixels_[o + 1], pixels_[o + 2]};
}

void Image::set_pixel(std::size_t y, std::size_t x, const Rgb& rgb) {
  for (std::size_t c = 0; c < 3; ++c) set(y, x, c, rgb[c]);
}

Image8 quantize(const Image& img) {
  Image8 out{img.height(), img.width(), std::vector<std::uint8_t>(img.pixels().size())};
  const auto& p = img.pixels();
  for (std::size_t i = 0; i < p.size(); ++i)
    out.rgb[i] = static_cast<std::uint8_t>(std::floor(std::clamp(p[i], 0.0, 1.0) * 255.0 + 0.5));
  return out;
}

Image dequantize(const Image8& img) {
  std::vector<double> data(img.rgb.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = img.rgb[i] / 255.0;
  return Image(Tensor({img.height, img.width, 3}, std::move(data)));
}

namespace {

template <typename Buffer>
void read_png_any(const std::filesystem::path& path, png_uint_32 format, std::size_t channels, std::size_t& h,
                  std::size_t& w, Buffer& buf) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = format;
  h = image.height;
  w = image.width;
  buf.assign(h * w * channels, 0);
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
}

void write_png_any(const std::filesystem::path& path, png_uint_32 format, std::size_t h, std::size_t w,
                   const std::uint8_t* data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace

Image8 read_png_rgb(const std::filesystem::path& path) {
  Image8 img;
  read_png_any(path, PNG_FORMAT_RGB, 3, img.height, img.width, img.rgb);
  return img;
}

void write_png_rgb(const std::filesystem::path& path, const Image8& img) {
  write_png_any(path, PNG_FORMAT_RGB, img.height, img.width, img.rgb.data());
}

Gray8 read_png_gray(const std::filesystem::path& path) {
  Gray8 img;
  read_png_any(path, PNG_FORMAT_GRAY, 1, img.height, img.width, img.values);
  return img;
}

void write_png_gray(const std::filesystem::path& path, const Gray8& img) {
  write_png_any(path, PNG_FORMAT_GRAY, img.height, img.width, img.values.data());
}

// Reinhard et al.'s RGB -> LMS matrix; the inverse is computed exactly from
// it (the rounded published inverse is only good to ~7e-3).
namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

constexpr Mat3 kRgbToLms = {{{0.3811, 0.5783, 0.0402}, {0.1967, 0.7244, 0.0782}, {0.0241, 0.1288, 0.8444}}};

Mat3 invert(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

const Mat3& lms_to_rgb_matrix() {
  static const Mat3 inv = invert(kRgbToLms);
  return inv;
}

const double kInvSqrt3 = 1.0 / std::sqrt(3.0);
const double kInvSqrt6 = 1.0 / std::sqrt(6.0);
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

}  // namespace

Tensor rgb_to_lab(const Image& img) {
  Tensor lab({img.height(), img.width(), 3});
  const auto& p = img.pixels();
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double r = p[3 * i], g = p[3 * i + 1], b = p[3 * i + 2];
    double lms[3];
    for (int k = 0; k < 3; ++k)
      lms[k] = std::log10(kRgbToLms[k][0] * r + kRgbToLms[k][1] * g + kRgbToLms[k][2] * b + kLogFloor);
    lab[3 * i] = kInvSqrt3 * (lms[0] + lms[1] + lms[2]);
    lab[3 * i + 1] = kInvSqrt6 * (lms[0] + lms[1] - 2.0 * lms[2]);
    lab[3 * i + 2] = kInvSqrt2 * (lms[0] - lms[1]);
  }
  return lab;
}

Image lab_to_rgb(const Tensor& lab, std::size_t& clamped_values) {
  if (lab.rank() != 3 || lab.dim(2) != 3)
    throw ShapeMismatch("lab_to_rgb: expected (H, W, 3), got " + shape_str(lab.shape()));
  const Mat3& inv = lms_to_rgb_matrix();
  Tensor rgb(lab.shape());
  clamped_values = 0;
  const std::size_t n = lab.dim(0) * lab.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double l = lab[3 * i] * kInvSqrt3, a = lab[3 * i + 1] * kInvSqrt6, bb = lab[3 * i + 2] * kInvSqrt2;
    const double log_lms[3] = {l + a + bb, l + a - bb, l - 2.0 * a};
    double lms[3];
    for (int k = 0; k < 3; ++k) lms[k] = std::pow(10.0, log_lms[k]) - kLogFloor;
    for (int c = 0; c < 3; ++c) {
      double v = inv[c][0] * lms[0] + inv[c][1] * lms[1] + inv[c][2] * lms[2];
      if (!(v >= 0.0 && v <= 1.0)) {
        ++clamped_values;
        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
      }
      rgb[3 * i + c] = v;
    }
  }
  return Image(std::move(rgb));
}

Image lab_to_rgb(const Tensor& lab) {
  std::size_t ignored = 0;
  return lab_to_rgb(lab, ignored);
}

std::vector<double> gaussian_kernel(int kernel, double sigma) {
  if (kernel != 3 && kernel != 5) throw std::invalid_argument("gaussian kernel size must be 3 or 5");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive");
  const int r = kernel / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    w[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += w[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : w) v /= total;
  return w;
}

namespace {

// Reflect-101 (dcb|abcd|cba); degenerate single-pixel axes clamp.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Image gaussian_blur(const Image& img, int kernel, double sigma) {
  const auto w = gaussian_kernel(kernel, sigma);
  const int r = kernel / 2;
  const std::size_t h = img.height(), wd = img.width();
  const auto& src = img.pixels();
  Tensor tmp({h, wd, 3});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k)
          acc += w[static_cast<std::size_t>(k + r)] * src[(y * wd + reflect(static_cast<std::ptrdiff_t>(x) + k, wd)) * 3 + c];
        tmp[(y * wd + x) * 3 + c] = acc;
      }
  Tensor out({h, wd, 3});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k)
          acc += w[static_cast<std::size_t>(k + r)] * tmp[(reflect(static_cast<std::ptrdiff_t>(y) + k, h) * wd + x) * 3 + c];
        out[(y * wd + x) * 3 + c] = acc;
      }
  return Image::clamped(std::move(out));
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize target must be at least 1x1");
  if (out_h == img.height() && out_w == img.width()) return img;
  const std::size_t h = img.height(), w = img.width();
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  Tensor out({out_h, out_w, 3});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
        const double bot = (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
        out[(y * out_w + x) * 3 + c] = (1 - fy) * top + fy * bot;
      }
    }
  }
  return Image::clamped(std::move(out));
}

void append_chw(const Image& img, std::vector<double>& dst) {
  const std::size_t n = img.pixel_count();
  const auto& p = img.pixels();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) dst.push_back(2.0 * p[3 * i + c] - 1.0);
}

Gray8 resize_nearest(const Gray8& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_nearest: output size must be positive");
  if (img.height == out_h && img.width == out_w) return img;
  Gray8 out{out_h, out_w, std::vector<std::uint8_t>(out_h * out_w)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(img.height - 1, (2 * y + 1) * img.height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(img.width - 1, (2 * x + 1) * img.width / (2 * out_w));
      out.values[y * out_w + x] = img.values[sy * img.width + sx];
    }
  }
  return out;
}

}  // namespace ulsa
