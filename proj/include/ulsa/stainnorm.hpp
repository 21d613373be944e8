#pragma once

#include <array>
#include "json.hpp"

#include "ulsa/image.hpp"

namespace ulsa {

inline constexpr double kStdFloor = 1e-6;

/// Channelwise l-alpha-beta statistics of a reference image (population std).
struct StainProfile {
  std::array<double, 3> mean{};
  std::array<double, 3> std{kStdFloor, kStdFloor, kStdFloor};
};

StainProfile profile_of(const Image& img);

/// Reinhard colour transfer: per lab channel x -> (x - mu_src) * sd_ref / sd_src + mu_ref.
Image reinhard_transfer(const Image& img, const StainProfile& reference);
/// Same, also reporting how many channel values were clamped on the way back to RGB.
Image reinhard_transfer(const Image& img, const StainProfile& reference, std::size_t& clamped_values);

/// Macenko stain basis: columns are unit optical-density stain vectors,
/// ordered so column 0 has the larger red-OD component.
struct StainMatrix {
  std::array<std::array<double, 2>, 3> vectors{};  // vectors[channel][stain]
  std::array<double, 2> max_concentrations{};

  std::array<double, 3> column(int stain) const {
    return {vectors[0][stain], vectors[1][stain], vectors[2][stain]};
  }
  bool operator==(const StainMatrix&) const = default;
};

struct MacenkoOptions {
  double alpha_pct = 1.0;  ///< percentile for the extreme angles
  double beta = 0.15;      ///< OD threshold; pixels with any component <= beta are ignored
  std::size_t min_pixels = 100;
};

/// Optical density with the 1/255 offset: OD = -log10((rgb + eps) / (1 + eps)),
/// so pure white maps to exactly zero OD.
double optical_density(double v);
double od_to_intensity(double od);

StainMatrix macenko_fit(const Image& img, const MacenkoOptions& options = {});
Image macenko_transfer(const Image& img, const StainMatrix& source, const StainMatrix& reference);

void to_json(nlohmann::json& j, const StainProfile& p);
void from_json(const nlohmann::json& j, StainProfile& p);
void to_json(nlohmann::json& j, const StainMatrix& m);
void from_json(const nlohmann::json& j, StainMatrix& m);

}  // namespace ulsa
