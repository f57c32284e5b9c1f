#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numbers>

#include "reto/error.hpp"

namespace reto {

// Row-major so that one point (token) is one contiguous row.
template <std::floating_point T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <std::floating_point T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Vec3 = Eigen::Vector3d;

inline void require_same_shape(Eigen::Index r0, Eigen::Index c0, Eigen::Index r1, Eigen::Index c1,
                               const char* what) {
  if (r0 != r1 || c0 != c1) {
    fail(ErrorCode::Shape, std::string(what) + ": " + std::to_string(r0) + "x" + std::to_string(c0) +
                               " vs " + std::to_string(r1) + "x" + std::to_string(c1));
  }
}

namespace detail {

// R rows x one SIMD-width column strip, accumulated over k in order.
template <std::floating_point T, int R, int W>
EIGEN_ALWAYS_INLINE void product_tile(const T* a, Eigen::Index lda, const T* b, Eigen::Index ldb, T* c,
                                      Eigen::Index ldc, Eigen::Index depth) {
  using Strip = Eigen::Array<T, 1, W>;
  Strip acc[R];
  for (int r = 0; r < R; ++r) acc[r].setZero();
  for (Eigen::Index k = 0; k < depth; ++k) {
    const Strip bk = Eigen::Map<const Strip>(b + k * ldb);
    for (int r = 0; r < R; ++r) acc[r] += a[r * lda + k] * bk;
  }
  for (int r = 0; r < R; ++r) Eigen::Map<Strip>(c + r * ldc) = acc[r];
}

}  // namespace detail

// a b where every output row is computed by the same instruction sequence,
// independent of how many rows a has or where a row sits. BLAS-style kernels
// switch paths on shape, so a point evaluated alone could differ in the last
// bit from the same point inside a batch.
template <std::floating_point T>
Matrix<T> matmul(const Eigen::Ref<const Matrix<T>>& a, const Eigen::Ref<const Matrix<T>>& b) {
  if (a.cols() != b.rows()) fail(ErrorCode::Shape, "matmul: inner dimensions differ");
  constexpr int W = EIGEN_MAX_ALIGN_BYTES / static_cast<int>(sizeof(T)) > 0
                        ? EIGEN_MAX_ALIGN_BYTES / static_cast<int>(sizeof(T))
                        : 2;
  constexpr int R = 8;
  const Eigen::Index n = a.rows(), depth = a.cols(), cols = b.cols();
  const Eigen::Index padded = (cols + W - 1) / W * W;
  // zero columns pad b to whole strips
  Matrix<T> b_pad;
  const T* bp = b.data();
  Eigen::Index ldb = b.outerStride();
  if (padded != cols) {
    b_pad = Matrix<T>::Zero(depth, padded);
    b_pad.leftCols(cols) = b;
    bp = b_pad.data();
    ldb = padded;
  }
  Matrix<T> c(n, padded);
  for (Eigen::Index j = 0; j < padded; j += W) {
    Eigen::Index i = 0;
    for (; i + R <= n; i += R) {
      detail::product_tile<T, R, W>(a.data() + i * a.outerStride(), a.outerStride(), bp + j, ldb, c.data() + i * padded + j,
                                    padded, depth);
    }
    for (; i < n; ++i) {
      detail::product_tile<T, 1, W>(a.data() + i * a.outerStride(), a.outerStride(), bp + j, ldb, c.data() + i * padded + j,
                                    padded, depth);
    }
  }
  if (padded != cols) return c.leftCols(cols);
  return c;
}

// y = x W + b (b broadcast over rows)
template <std::floating_point T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  if (x.cols() != w.rows()) fail(ErrorCode::Shape, "affine: input width does not match weight rows");
  Matrix<T> y = matmul<T>(x, w);
  y.rowwise() += b.row(0);
  return y;
}

// Exact (erf-based) GELU.
template <std::floating_point T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <std::floating_point T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <std::floating_point T>
Matrix<T> gelu(const Matrix<T>& x) {
  return x.unaryExpr([](T v) { return gelu(v); });
}

template <std::floating_point T>
Matrix<T> gelu_backward(const Matrix<T>& pre_activation, const Matrix<T>& upstream) {
  return upstream.cwiseProduct(pre_activation.unaryExpr([](T v) { return gelu_derivative(v); }));
}

template <std::floating_point T>
inline constexpr T kLayerNormEps = T(1e-5);

template <std::floating_point T>
struct LayerNormCache {
  Matrix<T> normalized;     // (x - mean) * inv_std
  Matrix<T> inv_std;        // N x 1
};

template <std::floating_point T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                     LayerNormCache<T>* cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  Matrix<T> normalized(n, d);
  Matrix<T> inv_std(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    // plain loops: Eigen's vectorized reductions peel by address, so equal rows
    // stored at different offsets could round differently
    T sum = 0;
    for (Eigen::Index j = 0; j < d; ++j) sum += x(i, j);
    const T mean = sum / static_cast<T>(d);
    T sq = 0;
    for (Eigen::Index j = 0; j < d; ++j) sq += (x(i, j) - mean) * (x(i, j) - mean);
    const T var = sq / static_cast<T>(d);
    inv_std(i, 0) = T(1) / std::sqrt(var + kLayerNormEps<T>);
    normalized.row(i) = (x.row(i).array() - mean) * inv_std(i, 0);
  }
  Matrix<T> y = (normalized.array().rowwise() * gain.row(0).array()).matrix();
  y.rowwise() += bias.row(0);
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// Returns dL/dx and accumulates dL/dgain, dL/dbias.
template <std::floating_point T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache, const Matrix<T>& gain,
                              const Matrix<T>& upstream, Matrix<T>& grad_gain, Matrix<T>& grad_bias) {
  const auto d = static_cast<T>(upstream.cols());
  grad_gain.row(0) += upstream.cwiseProduct(cache.normalized).colwise().sum();
  grad_bias.row(0) += upstream.colwise().sum();
  const Matrix<T> g = (upstream.array().rowwise() * gain.row(0).array()).matrix();
  Matrix<T> dx(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const T mean_g = g.row(i).mean();
    const T mean_gx = g.row(i).dot(cache.normalized.row(i)) / d;
    dx.row(i) = cache.inv_std(i, 0) *
                (g.row(i).array() - mean_g - cache.normalized.row(i).array() * mean_gx);
  }
  return dx;
}

// Row-wise softmax with the row maximum subtracted before exponentiation.
template <std::floating_point T>
void softmax_rows_inplace(Matrix<T>& logits) {
  // Each row goes through the same aligned scratch buffer, so the split between
  // vectorized and scalar exp (and the sum order) never depends on where the row lives.
  const auto cols = logits.cols();
  Eigen::Array<T, 1, Eigen::Dynamic> buf(cols);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    buf = row.array();
    buf = (buf - buf.maxCoeff()).exp();
    row = (buf / buf.sum()).matrix();
  }
}

}  // namespace reto
