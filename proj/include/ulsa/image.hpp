#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ulsa/tensor.hpp"

namespace ulsa {

using Rgb = std::array<double, 3>;

/// RGB image with channel values in [0, 1], stored as an (H, W, 3) tensor.
class Image {
 public:
  /// Blank (black) image.
  Image(std::size_t height, std::size_t width);
  /// Throws std::invalid_argument unless `pixels` is (H, W, 3) with values in [0, 1].
  explicit Image(Tensor pixels);
  /// Clamps every value into [0, 1]; NaN maps to 0.
  static Image clamped(Tensor pixels);
  static Image filled(std::size_t height, std::size_t width, const Rgb& color);

  std::size_t height() const { return pixels_.dim(0); }
  std::size_t width() const { return pixels_.dim(1); }
  std::size_t pixel_count() const { return height() * width(); }

  const Tensor& pixels() const { return pixels_; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels_[(y * width() + x) * 3 + c]; }
  /// Writes a clamped value.
  void set(std::size_t y, std::size_t x, std::size_t c, double v);
  Rgb pixel(std::size_t y, std::size_t x) const;
  void set_pixel(std::size_t y, std::size_t x, const Rgb& rgb);

  bool operator==(const Image&) const = default;

 private:
  Tensor pixels_;
};

/// 8-bit RGB image, the file-boundary representation; also used to hold
/// large in-memory pools compactly.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  bool operator==(const Image8&) const = default;
};

/// v -> round-half-up(clamp(v) * 255).
Image8 quantize(const Image& img);
/// u8 v -> v / 255.
Image dequantize(const Image8& img);

Image8 read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image8& img);
inline Image read_png(const std::filesystem::path& path) { return dequantize(read_png_rgb(path)); }
inline void write_png(const std::filesystem::path& path, const Image& img) { write_png_rgb(path, quantize(img)); }

/// Single-channel 8-bit maps (segmentation masks hold class indices).
struct Gray8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  bool operator==(const Gray8&) const = default;
};
Gray8 read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Gray8& img);

// --- Colour spaces -------------------------------------------------------

/// Reinhard l-alpha-beta: log10 of LMS (offset by kLogFloor) followed by
/// the fixed decorrelating transform. Returns an (H, W, 3) tensor.
Tensor rgb_to_lab(const Image& img);
/// Inverse of rgb_to_lab; result clamped into [0, 1].
Image lab_to_rgb(const Tensor& lab);
/// As lab_to_rgb, also reporting how many channel values needed clamping.
Image lab_to_rgb(const Tensor& lab, std::size_t& clamped_values);

inline constexpr double kLogFloor = 1.0 / 255.0;

// --- Filtering and resampling -------------------------------------------

/// Normalized 1-D Gaussian weights exp(-i^2 / (2 sigma^2)), i in [-k/2, k/2].
std::vector<double> gaussian_kernel(int kernel, double sigma);
/// Separable Gaussian blur with reflect-101 borders. kernel must be 3 or 5.
Image gaussian_blur(const Image& img, int kernel, double sigma);
/// Bilinear resampling with half-pixel centres:
/// src = (dst + 0.5) * in / out - 0.5, clamped to the valid range.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

/// Nearest-neighbour resampling of a label map, same centre convention
/// as resize_bilinear.
Gray8 resize_nearest(const Gray8& img, std::size_t out_h, std::size_t out_w);

/// (H, W, 3) image -> (3, H, W) planes appended to `dst`, mapped to [-1, 1].
void append_chw(const Image& img, std::vector<double>& dst);

}  // namespace ulsa
