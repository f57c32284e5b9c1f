#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "reto/attention.hpp"
#include "reto/random.hpp"
#include "reto/rope.hpp"

using namespace reto;

namespace {

Matrix<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

// Explicit block-diagonal rotation matrix for one point.
Eigen::MatrixXd dense_rotation(const Eigen::RowVectorXd& angles) {
  const auto pairs = angles.size();
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(2 * pairs, 2 * pairs);
  for (Eigen::Index n = 0; n < pairs; ++n) {
    r(2 * n, 2 * n) = std::cos(angles[n]);
    r(2 * n, 2 * n + 1) = -std::sin(angles[n]);
    r(2 * n + 1, 2 * n) = std::sin(angles[n]);
    r(2 * n + 1, 2 * n + 1) = std::cos(angles[n]);
  }
  return r;
}

// Brute-force attention: every logit, softmax and weighted sum written out.
Matrix<double> brute_attention(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v) {
  const auto n = q.rows();
  Matrix<double> out = Matrix<double>::Zero(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      logits[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(q.cols()));
    }
    double z = 0;
    for (double l : logits) z += std::exp(l);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double a = std::exp(logits[static_cast<std::size_t>(j)]) / z;
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += a * v(j, c);
    }
  }
  return out;
}

}  // namespace

TEST(RotaryConfig, EvenSplitRule) {
  const auto c6 = build_rotary_config(6, 100);
  EXPECT_EQ(c6.pairs_per_axis, (std::array<int, 3>{1, 1, 1}));
  for (int a = 0; a < 3; ++a) EXPECT_EQ(c6.axis_freqs[a], std::vector<double>{1.0});

  EXPECT_EQ(build_rotary_config(32, 100).pairs_per_axis, (std::array<int, 3>{6, 5, 5}));

  const auto c4 = build_rotary_config(4, 100);
  EXPECT_EQ(c4.pairs_per_axis, (std::array<int, 3>{1, 1, 0}));
  EXPECT_EQ(c4.unencoded_axes(), std::vector<int>{2});

  try {
    build_rotary_config(5, 100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidDimension);
  }
}

TEST(RotaryConfig, AxisLaddersDecrease) {
  const auto c = build_rotary_config(32, 100);
  for (int a = 0; a < 3; ++a) {
    const auto& f = c.axis_freqs[a];
    EXPECT_EQ(f[0], 1.0);
    for (std::size_t k = 1; k < f.size(); ++k) {
      EXPECT_LT(f[k], f[k - 1]);
      EXPECT_NEAR(f[k], std::pow(100.0, -static_cast<double>(k) / static_cast<double>(f.size())), 1e-15);
    }
  }
}

TEST(ComputePhases, Anchors) {
  const auto c = build_rotary_config(6, 100);
  Matrix<double> coords(2, 3);
  coords << 0, 0, 0, 1, 0, 0;
  const auto phases = compute_phases(coords, c);
  EXPECT_EQ(phases.angles.row(0), Eigen::RowVector3d(0, 0, 0));
  EXPECT_EQ(phases.angles.row(1), Eigen::RowVector3d(1, 0, 0));

  coords(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(compute_phases(coords, c), Error);
}

TEST(ComputePhases, UnallocatedPairsStayAtZero) {
  const auto c = make_rotary_config(8, {1, 1, 0}, 100);
  Rng rng(3);
  const auto phases = compute_phases(random_matrix(rng, 10, 3, 5.0), c);
  for (Eigen::Index i = 0; i < 10; ++i) {
    EXPECT_EQ(phases.angles(i, 2), 0.0);
    EXPECT_EQ(phases.angles(i, 3), 0.0);
  }
}

TEST(ComputePhases, DifferenceIsPhaseOfDisplacement) {
  const auto c = build_rotary_config(32, 100);
  Rng rng(17);
  const auto xi = random_matrix(rng, 50, 3);
  const auto xj = random_matrix(rng, 50, 3);
  const Matrix<double> dx = xi - xj;
  const auto pi = compute_phases(xi, c);
  const auto pj = compute_phases(xj, c);
  const auto pd = compute_phases(dx, c);
  EXPECT_LE((pi.angles - pj.angles - pd.angles).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ApplyRotary, IdentityAndQuarterTurn) {
  Matrix<double> v(1, 2);
  v << 1, 0;
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1, 1);
  EXPECT_EQ(apply_rotary(v, PhaseTable::from_angles(zero)), v);

  Eigen::MatrixXd quarter = Eigen::MatrixXd::Constant(1, 1, std::numbers::pi / 2);
  const auto r = apply_rotary(v, PhaseTable::from_angles(quarter));
  EXPECT_NEAR(r(0, 0), 0.0, 1e-16);
  EXPECT_NEAR(r(0, 1), 1.0, 1e-16);

  EXPECT_THROW(apply_rotary(Matrix<double>(Matrix<double>::Zero(1, 4)), PhaseTable::from_angles(zero)), Error);
}

TEST(ApplyRotary, MatchesDenseBlockDiagonalAndPreservesNorm) {
  Rng rng(23);
  for (int d : {2, 6, 32}) {
    const auto v = random_matrix(rng, 40, d);
    Eigen::MatrixXd angles(40, d / 2);
    for (Eigen::Index i = 0; i < angles.size(); ++i) angles.data()[i] = rng.uniform(-10, 10);
    const auto phases = PhaseTable::from_angles(angles);
    const auto rotated = apply_rotary(v, phases);
    for (Eigen::Index i = 0; i < 40; ++i) {
      const Eigen::VectorXd dense = dense_rotation(angles.row(i)) * v.row(i).transpose();
      EXPECT_LE((rotated.row(i).transpose() - dense).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_NEAR(rotated.row(i).norm(), v.row(i).norm(), 1e-6 * v.row(i).norm());
    }
  }
}

TEST(ApplyRotary, AdjointIsDenseTranspose) {
  Rng rng(29);
  const auto g = random_matrix(rng, 25, 32);
  Eigen::MatrixXd angles(25, 16);
  for (Eigen::Index i = 0; i < angles.size(); ++i) angles.data()[i] = rng.uniform(-4, 4);
  const auto phases = PhaseTable::from_angles(angles);
  const auto back = apply_rotary_adjoint(g, phases);
  for (Eigen::Index i = 0; i < 25; ++i) {
    const Eigen::VectorXd dense = dense_rotation(angles.row(i)).transpose() * g.row(i).transpose();
    EXPECT_LE((back.row(i).transpose() - dense).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(RotaryOracle, Anchors) {
  const auto c = build_rotary_config(2, 100);
  const std::vector<double> q{0.3, -1.2}, k{2.0, 0.5};
  EXPECT_NEAR(rotary_inner_product_oracle(q, k, Vec3(1, 2, 3), Vec3(1, 2, 3), c), 0.3 * 2.0 - 1.2 * 0.5, 1e-15);

  const std::vector<double> unit{1.0, 0.0};
  // pair 0 is the x axis with frequency 1, so a displacement of pi along x gives phase pi.
  EXPECT_NEAR(rotary_inner_product_oracle(unit, unit, Vec3(std::numbers::pi, 0, 0), Vec3(0, 0, 0), c), -1.0,
              1e-15);
}

TEST(RotaryOracle, RealRotationMatchesComplexIdentity) {
  Rng rng(31);
  for (int d : {2, 6, 32}) {
    const auto config = build_rotary_config(d, 100);
    for (int trial = 0; trial < 1000; ++trial) {
      const auto q = random_matrix(rng, 1, d);
      const auto k = random_matrix(rng, 1, d);
      Matrix<double> xi = random_matrix(rng, 1, 3), xj = random_matrix(rng, 1, 3);
      const double real = apply_rotary(q, compute_phases(xi, config)).row(0).dot(
          apply_rotary(k, compute_phases(xj, config)).row(0));
      const double oracle = rotary_inner_product_oracle(std::span<const double>(q.data(), d),
                                                        std::span<const double>(k.data(), d),
                                                        xi.row(0).transpose(), xj.row(0).transpose(), config);
      ASSERT_NEAR(real, oracle, 1e-10);
    }
  }
}

TEST(ScaledDotAttention, SinglePointReturnsValue) {
  Rng rng(1);
  const auto q = random_matrix(rng, 1, 4), k = random_matrix(rng, 1, 4), v = random_matrix(rng, 1, 4);
  const auto out = scaled_dot_attention(q, k, v, nullptr, true);
  EXPECT_EQ(out.values, v);
  EXPECT_EQ((*out.weights)(0, 0), 1.0);
}

TEST(ScaledDotAttention, IdenticalKeysGiveUniformWeights) {
  Rng rng(2);
  const auto q = random_matrix(rng, 7, 6);
  Matrix<double> k(7, 6);
  const auto row = random_matrix(rng, 1, 6);
  for (int i = 0; i < 7; ++i) k.row(i) = row.row(0);
  const auto v = random_matrix(rng, 7, 6);
  const auto out = scaled_dot_attention(q, k, v, nullptr, true);
  EXPECT_LE(((*out.weights).array() - 1.0 / 7.0).abs().maxCoeff(), 1e-15);
}

TEST(ScaledDotAttention, ThreePointBruteForce) {
  Matrix<double> q(3, 2), k(3, 2), v(3, 2);
  q << 1, 0, 0, 1, 1, 1;
  k << 1, 2, -1, 0, 0.5, 0.5;
  v << 1, 10, 2, 20, 3, 30;
  const auto out = scaled_dot_attention(q, k, v, nullptr, true);
  EXPECT_LE((out.values - brute_attention(q, k, v)).cwiseAbs().maxCoeff(), 1e-14);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(out.weights->row(i).sum(), 1.0, 1e-15);
    EXPECT_GE(out.weights->row(i).minCoeff(), 0.0);
  }
}

TEST(ScaledDotAttention, RopeRotatesQueryAndKeyOnly) {
  Rng rng(4);
  const auto config = build_rotary_config(6, 100);
  const auto q = random_matrix(rng, 5, 6), k = random_matrix(rng, 5, 6), v = random_matrix(rng, 5, 6);
  const auto phases = compute_phases(random_matrix(rng, 5, 3), config);
  const auto out = scaled_dot_attention(q, k, v, &phases, false);
  const auto expected = brute_attention(apply_rotary(q, phases), apply_rotary(k, phases), v);
  EXPECT_LE((out.values - expected).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_FALSE(out.weights.has_value());
  EXPECT_THROW(scaled_dot_attention(q, Matrix<double>(k.topRows(4)), v, nullptr, false), Error);
}

TEST(ScaledDotAttention, ChunkedPathMatchesRetainedPath) {
  Rng rng(6);
  const auto q = random_matrix(rng, 600, 8), k = random_matrix(rng, 600, 8), v = random_matrix(rng, 600, 8);
  const auto a = scaled_dot_attention(q, k, v, nullptr, false);
  const auto b = scaled_dot_attention(q, k, v, nullptr, true);
  EXPECT_LE((a.values - b.values).cwiseAbs().maxCoeff(), 1e-13);
}

namespace {

struct MhaFixture {
  std::vector<Matrix<double>> wq, wk, wv;
  Matrix<double> wo;

  MhaFixture(Rng& rng, int d, int h, double scale = 0.5) {
    for (int i = 0; i < h; ++i) {
      wq.push_back(random_matrix(rng, d, d / h, scale));
      wk.push_back(random_matrix(rng, d, d / h, scale));
      wv.push_back(random_matrix(rng, d, d / h, scale));
    }
    wo = random_matrix(rng, d, d, scale);
  }

  MhaWeights<double> weights() const {
    MhaWeights<double> w;
    for (std::size_t i = 0; i < wq.size(); ++i) {
      w.wq.push_back(&wq[i]);
      w.wk.push_back(&wk[i]);
      w.wv.push_back(&wv[i]);
    }
    w.wo = &wo;
    return w;
  }
};

}  // namespace

TEST(MultiHeadAttention, SingleHeadReducesToAttentionThenProjection) {
  Rng rng(8);
  MhaFixture f(rng, 6, 1);
  const auto x = random_matrix(rng, 4, 6);
  const auto out = multi_head_attention(x, f.weights(), nullptr);
  const Matrix<double> expected = brute_attention(x * f.wq[0], x * f.wk[0], x * f.wv[0]) * f.wo;
  EXPECT_LE((out - expected).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(MultiHeadAttention, ZeroWeightsGiveZeroOutput) {
  Rng rng(9);
  MhaFixture f(rng, 8, 2, 0.0);
  const auto x = random_matrix(rng, 5, 8);
  EXPECT_EQ(multi_head_attention(x, f.weights(), nullptr).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MultiHeadAttention, TwoHeadsMatchPerHeadConcatenation) {
  Rng rng(10);
  const auto config = build_rotary_config(6, 100);
  MhaFixture f(rng, 12, 2, 0.3);
  const auto x = random_matrix(rng, 3, 12);
  const auto phases = compute_phases(random_matrix(rng, 3, 3), config);
  const auto out = multi_head_attention(x, f.weights(), &phases);
  Matrix<double> concat(3, 12);
  for (int h = 0; h < 2; ++h) {
    concat.middleCols(6 * h, 6) = brute_attention(apply_rotary(Matrix<double>(x * f.wq[h]), phases),
                                                  apply_rotary(Matrix<double>(x * f.wk[h]), phases), x * f.wv[h]);
  }
  EXPECT_LE((out - concat * f.wo).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(MultiHeadAttention, IndivisibleWidthIsConfigurationError) {
  Rng rng(12);
  MhaFixture f(rng, 6, 2);
  const auto x = random_matrix(rng, 3, 7);
  try {
    multi_head_attention(x, f.weights(), nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Configuration);
  }
}

TEST(MultiHeadAttention, TranslationInvariantUnderRope) {
  Rng rng(13);
  const auto config = build_rotary_config(8, 100);
  MhaFixture f(rng, 16, 2);
  const auto x = random_matrix(rng, 20, 16);
  const auto coords = random_matrix(rng, 20, 3);
  Matrix<double> shifted = coords;
  shifted.rowwise() += Eigen::RowVector3d(5, -3, 7);
  const auto p0 = compute_phases(coords, config);
  const auto p1 = compute_phases(shifted, config);
  const auto a = multi_head_attention(x, f.weights(), &p0);
  const auto b = multi_head_attention(x, f.weights(), &p1);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-5 * a.cwiseAbs().maxCoeff());

  // Uniform scaling is a genuine change, not an invariance.
  const Matrix<double> scaled = coords * 3.0;
  const auto p2 = compute_phases(scaled, config);
  EXPECT_GT((multi_head_attention(x, f.weights(), &p2) - a).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(MultiHeadAttention, PermutationEquivariant) {
  Rng rng(14);
  const auto config = build_rotary_config(8, 100);
  MhaFixture f(rng, 16, 2);
  const auto x = random_matrix(rng, 15, 16);
  const auto coords = random_matrix(rng, 15, 3);
  const auto perm = random_permutation(15, 99);
  Matrix<double> xp(15, 16), cp(15, 3);
  for (int i = 0; i < 15; ++i) {
    xp.row(i) = x.row(static_cast<Eigen::Index>(perm[i]));
    cp.row(i) = coords.row(static_cast<Eigen::Index>(perm[i]));
  }
  const auto p0 = compute_phases(coords, config);
  const auto p1 = compute_phases(cp, config);
  const auto a = multi_head_attention(x, f.weights(), &p0);
  const auto b = multi_head_attention(xp, f.weights(), &p1);
  for (int i = 0; i < 15; ++i) {
    EXPECT_LE((b.row(i) - a.row(static_cast<Eigen::Index>(perm[i]))).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MultiHeadAttention, HeadOrderDoesNotAffectResult) {
  Rng rng(15);
  MhaFixture f(rng, 16, 4);
  const auto x = random_matrix(rng, 30, 16);
  set_thread_count(1);
  const auto serial = multi_head_attention(x, f.weights(), nullptr);
  set_thread_count(4);
  const auto threaded = multi_head_attention(x, f.weights(), nullptr);
  set_thread_count(1);
  EXPECT_EQ(serial, threaded);
}
