#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "reto/error.hpp"
#include "reto/linalg.hpp"

namespace reto {

// Geometric ladder of per-axis frequencies: freqs[n] = base^(-2n/m).
struct FrequencyTable {
  double wavelength_base = 10000.0;
  int per_axis_dim = 0;
  std::vector<double> freqs;

  int half() const { return per_axis_dim / 2; }
};

inline FrequencyTable build_frequency_table(int per_axis_dim, double wavelength_base) {
  require(per_axis_dim >= 2 && per_axis_dim % 2 == 0, ErrorCode::InvalidDimension,
          "per-axis dimension must be even and >= 2, got " + std::to_string(per_axis_dim));
  require(wavelength_base > 1.0, ErrorCode::InvalidBase,
          "wavelength base must exceed 1, got " + std::to_string(wavelength_base));
  FrequencyTable table{wavelength_base, per_axis_dim, {}};
  table.freqs.reserve(static_cast<std::size_t>(per_axis_dim / 2));
  for (int n = 0; n < per_axis_dim / 2; ++n) {
    table.freqs.push_back(std::pow(wavelength_base, -2.0 * n / per_axis_dim));
  }
  return table;
}

// [sin(x w_0) ... sin(x w_{m/2-1}), cos(x w_0) ... cos(x w_{m/2-1})]
inline std::vector<double> encode_axis(double coordinate, const FrequencyTable& table) {
  require(std::isfinite(coordinate), ErrorCode::NonFiniteInput, "encode_axis: non-finite coordinate");
  const auto half = static_cast<std::size_t>(table.half());
  std::vector<double> out(2 * half);
  for (std::size_t n = 0; n < half; ++n) {
    const double angle = coordinate * table.freqs[n];
    out[n] = std::sin(angle);
    out[half + n] = std::cos(angle);
  }
  return out;
}

// Concatenation [gamma(x), gamma(y), gamma(z)], length 3m.
inline std::vector<double> encode_point(const Vec3& coords, const FrequencyTable& table) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(3 * table.per_axis_dim));
  for (int axis = 0; axis < 3; ++axis) {
    const auto block = encode_axis(coords[axis], table);
    out.insert(out.end(), block.begin(), block.end());
  }
  return out;
}

// Batched encode_point over the rows of an N x 3 matrix.
template <std::floating_point T>
Matrix<T> encode_points(const Matrix<T>& coords, const FrequencyTable& table) {
  require(coords.cols() == 3, ErrorCode::Shape, "encode_points expects N x 3 coordinates");
  const int m = table.per_axis_dim;
  const int half = table.half();
  Matrix<T> out(coords.rows(), 3 * m);
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    for (int axis = 0; axis < 3; ++axis) {
      const double c = static_cast<double>(coords(i, axis));
      require(std::isfinite(c), ErrorCode::NonFiniteInput, "encode_points: non-finite coordinate");
      for (int n = 0; n < half; ++n) {
        const double angle = c * table.freqs[static_cast<std::size_t>(n)];
        out(i, axis * m + n) = static_cast<T>(std::sin(angle));
        out(i, axis * m + half + n) = static_cast<T>(std::cos(angle));
      }
    }
  }
  return out;
}

// Isotropic bounding-cube map onto [-1, 1]^3: (c - center) * scale.
struct CoordinateNormalizer {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& c) const { return (c - center) * scale; }
  Vec3 invert(const Vec3& c) const { return c / scale + center; }

  template <std::floating_point T>
  Matrix<T> apply(const Matrix<T>& coords) const {
    require(coords.cols() == 3, ErrorCode::Shape, "normalizer expects N x 3 coordinates");
    Matrix<T> out(coords.rows(), 3);
    for (Eigen::Index i = 0; i < coords.rows(); ++i) {
      for (int a = 0; a < 3; ++a) {
        out(i, a) = static_cast<T>((static_cast<double>(coords(i, a)) - center[a]) * scale);
      }
    }
    return out;
  }
};

inline CoordinateNormalizer fit_normalizer(std::span<const Vec3> training_coords) {
  require(!training_coords.empty(), ErrorCode::EmptyDataset, "fit_normalizer: no coordinates");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& c : training_coords) {
    require(c.allFinite(), ErrorCode::NonFiniteInput, "fit_normalizer: non-finite coordinate");
    lo = lo.cwiseMin(c);
    hi = hi.cwiseMax(c);
  }
  const double extent = (hi - lo).maxCoeff();
  require(extent > 0.0, ErrorCode::DegenerateGeometry, "fit_normalizer: zero-extent bounding box");
  return CoordinateNormalizer{0.5 * (lo + hi), 2.0 / extent};
}

inline Vec3 apply_normalizer(const Vec3& c, const CoordinateNormalizer& n) { return n.apply(c); }
inline Vec3 invert_normalizer(const Vec3& c, const CoordinateNormalizer& n) { return n.invert(c); }

}  // namespace reto
