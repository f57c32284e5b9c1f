#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <span>
#include <string>
#include <vector>

#include "reto/error.hpp"
#include "reto/linalg.hpp"

namespace reto {

// 3D rotary layout. Rotation pairs are split into contiguous per-axis groups;
// pair n belongs to exactly one axis (or none), so its phase is a single-axis
// function of the coordinate. Each group carries its own geometric ladder.
struct RotaryConfig {
  int head_dim = 0;
  std::array<int, 3> pairs_per_axis{};
  double rope_base = 100.0;
  std::array<std::vector<double>, 3> axis_freqs;

  int pair_count() const { return head_dim / 2; }
  int allocated_pairs() const { return pairs_per_axis[0] + pairs_per_axis[1] + pairs_per_axis[2]; }

  // Axes that receive no rotation pairs (e.g. head_dim = 4 leaves z unencoded).
  std::vector<int> unencoded_axes() const {
    std::vector<int> axes;
    for (int a = 0; a < 3; ++a) {
      if (pairs_per_axis[a] == 0) axes.push_back(a);
    }
    return axes;
  }

  // Dense (head_dim/2) x 3 matrix of omega_{n,p}; zero outside the pair's axis group.
  Eigen::MatrixXd frequency_matrix() const {
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(pair_count(), 3);
    int n = 0;
    for (int a = 0; a < 3; ++a) {
      for (int k = 0; k < pairs_per_axis[a]; ++k, ++n) omega(n, a) = axis_freqs[a][k];
    }
    return omega;
  }
};

inline RotaryConfig make_rotary_config(int head_dim, std::array<int, 3> pairs_per_axis, double rope_base) {
  require(head_dim >= 2 && head_dim % 2 == 0, ErrorCode::InvalidDimension,
          "rotary head dimension must be even and >= 2, got " + std::to_string(head_dim));
  require(rope_base > 1.0, ErrorCode::InvalidBase, "rotary base must exceed 1");
  int total = 0;
  for (int p : pairs_per_axis) {
    require(p >= 0, ErrorCode::InvalidDimension, "negative pair count");
    total += p;
  }
  require(total <= head_dim / 2, ErrorCode::InvalidDimension, "more rotary pairs than head_dim/2");
  RotaryConfig config{head_dim, pairs_per_axis, rope_base, {}};
  for (int a = 0; a < 3; ++a) {
    const int p = pairs_per_axis[a];
    for (int k = 0; k < p; ++k) {
      config.axis_freqs[a].push_back(std::pow(rope_base, -2.0 * k / (2.0 * p)));
    }
  }
  return config;
}

// Even split of head_dim/2 pairs over (x, y, z); remainders go to x first, then y.
inline RotaryConfig build_rotary_config(int head_dim, double rope_base) {
  require(head_dim >= 2 && head_dim % 2 == 0, ErrorCode::InvalidDimension,
          "rotary head dimension must be even and >= 2, got " + std::to_string(head_dim));
  const int pairs = head_dim / 2;
  std::array<int, 3> split{pairs / 3, pairs / 3, pairs / 3};
  for (int a = 0; a < pairs % 3; ++a) ++split[a];
  return make_rotary_config(head_dim, split, rope_base);
}

// Per-point rotation angles theta_n(x_i), with cached cos/sin.
struct PhaseTable {
  Eigen::MatrixXd angles;  // N x (head_dim/2)
  Eigen::MatrixXd cos;
  Eigen::MatrixXd sin;

  Eigen::Index points() const { return angles.rows(); }
  Eigen::Index pairs() const { return angles.cols(); }

  static PhaseTable from_angles(Eigen::MatrixXd angles) {
    PhaseTable t;
    t.cos = angles.unaryExpr([](double a) { return std::cos(a); });
    t.sin = angles.unaryExpr([](double a) { return std::sin(a); });
    t.angles = std::move(angles);
    return t;
  }
};

template <std::floating_point T>
PhaseTable compute_phases(const Matrix<T>& coords, const RotaryConfig& config) {
  require(coords.cols() == 3, ErrorCode::Shape, "compute_phases expects N x 3 coordinates");
  Eigen::MatrixXd angles = Eigen::MatrixXd::Zero(coords.rows(), config.pair_count());
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    int n = 0;
    for (int a = 0; a < 3; ++a) {
      const double c = static_cast<double>(coords(i, a));
      require(std::isfinite(c), ErrorCode::NonFiniteInput, "compute_phases: non-finite coordinate");
      for (int k = 0; k < config.pairs_per_axis[a]; ++k, ++n) angles(i, n) = c * config.axis_freqs[a][k];
    }
  }
  return PhaseTable::from_angles(std::move(angles));
}

namespace detail {

template <std::floating_point T>
Matrix<T> rotate_pairs(const Matrix<T>& vectors, const PhaseTable& phases, T direction) {
  if (vectors.rows() != phases.points() || vectors.cols() != 2 * phases.pairs()) {
    fail(ErrorCode::Shape, "apply_rotary: vectors are " + std::to_string(vectors.rows()) + "x" +
                               std::to_string(vectors.cols()) + ", phases cover " +
                               std::to_string(phases.points()) + " points x " +
                               std::to_string(phases.pairs()) + " pairs");
  }
  Matrix<T> out(vectors.rows(), vectors.cols());
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    for (Eigen::Index n = 0; n < phases.pairs(); ++n) {
      const T c = static_cast<T>(phases.cos(i, n));
      const T s = direction * static_cast<T>(phases.sin(i, n));
      const T v = vectors(i, 2 * n);
      const T w = vectors(i, 2 * n + 1);
      out(i, 2 * n) = v * c - w * s;
      out(i, 2 * n + 1) = v * s + w * c;
    }
  }
  return out;
}

}  // namespace detail

// Rotates pair (v_{2n}, v_{2n+1}) of row i by phases[i][n].
template <std::floating_point T>
Matrix<T> apply_rotary(const Matrix<T>& vectors, const PhaseTable& phases) {
  return detail::rotate_pairs(vectors, phases, T(1));
}

// Transpose of apply_rotary: rotation by -theta. Used to pull gradients back.
template <std::floating_point T>
Matrix<T> apply_rotary_adjoint(const Matrix<T>& vectors, const PhaseTable& phases) {
  return detail::rotate_pairs(vectors, phases, T(-1));
}

// Complex-domain evaluation of <R(x_i) q, R(x_j) k>:
//   Re[ sum_n q^(n) conj(k^(n)) exp(i (theta_n(x_i) - theta_n(x_j))) ]
// Shares nothing with apply_rotary beyond the frequency values.
inline double rotary_inner_product_oracle(std::span<const double> q, std::span<const double> k,
                                          const Vec3& x_i, const Vec3& x_j, const RotaryConfig& config) {
  require(static_cast<int>(q.size()) == config.head_dim && static_cast<int>(k.size()) == config.head_dim,
          ErrorCode::Shape, "oracle vectors must have head_dim entries");
  const Eigen::MatrixXd omega = config.frequency_matrix();
  const Eigen::VectorXd displacement_phase = omega * (x_i - x_j);
  std::complex<double> acc{0.0, 0.0};
  for (int n = 0; n < config.pair_count(); ++n) {
    const std::complex<double> qn{q[2 * n], q[2 * n + 1]};
    const std::complex<double> kn{k[2 * n], k[2 * n + 1]};
    acc += qn * std::conj(kn) * std::polar(1.0, displacement_phase[n]);
  }
  return acc.real();
}

}  // namespace reto
