#include "ulsa/stainnorm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include "json.hpp"

#include "ulsa/error.hpp"

namespace ulsa {

StainProfile profile_of(const Image& img) {
  const Tensor lab = rgb_to_lab(img);
  const std::size_t n = img.pixel_count();
  StainProfile p;
  for (std::size_t c = 0; c < 3; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += lab[3 * i + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = lab[3 * i + c] - mu;
      var += d * d;
    }
    p.mean[c] = mu;
    p.std[c] = std::max(std::sqrt(var / static_cast<double>(n)), kStdFloor);
  }
  return p;
}

Image reinhard_transfer(const Image& img, const StainProfile& reference, std::size_t& clamped_values) {
  const StainProfile src = profile_of(img);
  Tensor lab = rgb_to_lab(img);
  const std::size_t n = img.pixel_count();
  for (std::size_t c = 0; c < 3; ++c) {
    const double gain = reference.std[c] / src.std[c];
    for (std::size_t i = 0; i < n; ++i) lab[3 * i + c] = (lab[3 * i + c] - src.mean[c]) * gain + reference.mean[c];
  }
  return lab_to_rgb(lab, clamped_values);
}

Image reinhard_transfer(const Image& img, const StainProfile& reference) {
  std::size_t ignored = 0;
  return reinhard_transfer(img, reference, ignored);
}

namespace {
constexpr double kOdEps = 1.0 / 255.0;

// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

using Basis = Eigen::Matrix<double, 3, 2>;

Basis basis_of(const StainMatrix& m) {
  Basis b;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) b(r, c) = m.vectors[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  return b;
}

// Least-squares concentrations per pixel, clamped at zero: (2, N).
Eigen::Matrix<double, 2, Eigen::Dynamic> unmix(const Eigen::Matrix<double, 3, Eigen::Dynamic>& od, const Basis& basis) {
  const Eigen::Matrix<double, 2, 3> pinv = (basis.transpose() * basis).inverse() * basis.transpose();
  Eigen::Matrix<double, 2, Eigen::Dynamic> conc = pinv * od;
  return conc.cwiseMax(0.0);
}

Eigen::Matrix<double, 3, Eigen::Dynamic> od_matrix(const Image& img) {
  const std::size_t n = img.pixel_count();
  Eigen::Matrix<double, 3, Eigen::Dynamic> od(3, static_cast<Eigen::Index>(n));
  const auto& p = img.pixels();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) od(c, static_cast<Eigen::Index>(i)) = optical_density(p[3 * i + static_cast<std::size_t>(c)]);
  return od;
}

}  // namespace

double optical_density(double v) { return -std::log10((v + kOdEps) / (1.0 + kOdEps)); }

double od_to_intensity(double od) { return (1.0 + kOdEps) * std::pow(10.0, -od) - kOdEps; }

StainMatrix macenko_fit(const Image& img, const MacenkoOptions& options) {
  const auto od = od_matrix(img);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index i = 0; i < od.cols(); ++i)
    if ((od.col(i).array() > options.beta).all()) kept.push_back(i);
  if (kept.size() < options.min_pixels)
    throw InsufficientTissue("macenko_fit: only " + std::to_string(kept.size()) + " pixels exceed OD threshold " +
                             std::to_string(options.beta) + " (need " + std::to_string(options.min_pixels) + ")");

  Eigen::Matrix<double, 3, Eigen::Dynamic> tissue(3, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t j = 0; j < kept.size(); ++j) tissue.col(static_cast<Eigen::Index>(j)) = od.col(kept[j]);
  const Eigen::Vector3d mu = tissue.rowwise().mean();
  const Eigen::Matrix<double, 3, Eigen::Dynamic> centered = tissue.colwise() - mu;
  const Eigen::Matrix3d cov = centered * centered.transpose() / static_cast<double>(kept.size() - 1);

  // Eigenvalues ascend: the principal plane is spanned by columns 2 and 1.
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Matrix<double, 3, 2> plane;
  plane.col(0) = eig.eigenvectors().col(2);
  plane.col(1) = eig.eigenvectors().col(1);
  for (int c = 0; c < 2; ++c)
    if (plane(0, c) < 0) plane.col(c) = -plane.col(c);

  std::vector<double> angles(kept.size());
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const Eigen::Vector2d proj = plane.transpose() * tissue.col(static_cast<Eigen::Index>(j));
    angles[j] = std::atan2(proj(1), proj(0));
  }
  const double lo = percentile(angles, options.alpha_pct);
  const double hi = percentile(angles, 100.0 - options.alpha_pct);
  if (hi - lo < 1e-3)
    throw DegenerateStains("macenko_fit: extreme stain angles differ by only " + std::to_string(hi - lo) + " rad");

  auto direction = [&](double phi) {
    Eigen::Vector3d v = plane * Eigen::Vector2d(std::cos(phi), std::sin(phi));
    if (v.sum() < 0) v = -v;
    v = v.cwiseMax(0.0);
    const double norm = v.norm();
    if (norm == 0.0) throw DegenerateStains("macenko_fit: stain direction has no positive OD component");
    return Eigen::Vector3d(v / norm);
  };
  Eigen::Vector3d a = direction(lo), b = direction(hi);
  if (b(0) > a(0)) std::swap(a, b);

  StainMatrix m;
  for (int r = 0; r < 3; ++r) {
    m.vectors[static_cast<std::size_t>(r)][0] = a(r);
    m.vectors[static_cast<std::size_t>(r)][1] = b(r);
  }
  const auto conc = unmix(od, basis_of(m));
  for (int s = 0; s < 2; ++s) {
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(conc.cols()));
    for (Eigen::Index i = 0; i < conc.cols(); ++i) row.push_back(conc(s, i));
    m.max_concentrations[static_cast<std::size_t>(s)] = percentile(std::move(row), 99.0);
  }
  return m;
}

Image macenko_transfer(const Image& img, const StainMatrix& source, const StainMatrix& reference) {
  const auto od = od_matrix(img);
  auto conc = unmix(od, basis_of(source));
  for (int s = 0; s < 2; ++s) {
    const double src_max = source.max_concentrations[static_cast<std::size_t>(s)];
    const double gain = src_max > 0.0 ? reference.max_concentrations[static_cast<std::size_t>(s)] / src_max : 1.0;
    conc.row(s) *= gain;
  }
  const Eigen::Matrix<double, 3, Eigen::Dynamic> remixed = basis_of(reference) * conc;
  Tensor out({img.height(), img.width(), 3});
  for (Eigen::Index i = 0; i < remixed.cols(); ++i)
    for (int c = 0; c < 3; ++c)
      out[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)] = od_to_intensity(remixed(c, i));
  return Image::clamped(std::move(out));
}

void to_json(nlohmann::json& j, const StainProfile& p) {
  j = {{"kind", "reinhard_profile"}, {"mean", p.mean}, {"std", p.std}};
}

void from_json(const nlohmann::json& j, StainProfile& p) {
  if (j.value("kind", "") != "reinhard_profile") throw IoError("JSON document is not a reinhard_profile");
  p.mean = j.at("mean").get<std::array<double, 3>>();
  p.std = j.at("std").get<std::array<double, 3>>();
  for (auto& s : p.std) s = std::max(s, kStdFloor);
}

void to_json(nlohmann::json& j, const StainMatrix& m) {
  j = {{"kind", "macenko_matrix"}, {"vectors", m.vectors}, {"max_concentrations", m.max_concentrations}};
}

void from_json(const nlohmann::json& j, StainMatrix& m) {
  if (j.value("kind", "") != "macenko_matrix") throw IoError("JSON document is not a macenko_matrix");
  m.vectors = j.at("vectors").get<std::array<std::array<double, 2>, 3>>();
  m.max_concentrations = j.at("max_concentrations").get<std::array<double, 2>>();
}

}  // namespace ulsa
