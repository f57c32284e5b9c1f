#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <type_traits>
#include <vector>

#include "reto/error.hpp"
#include "reto/linalg.hpp"
#include "reto/parallel.hpp"
#include "reto/rope.hpp"

namespace reto {

template <std::floating_point T>
struct AttentionOutput {
  Matrix<T> values;                 // N x d_h
  std::optional<Matrix<T>> weights;  // N x N, row-stochastic; analysis mode only
};

// Receives consecutive blocks of attention rows (head, first row index, rows x N).
template <std::floating_point T>
using AttentionRowSink = std::function<void(int head, Eigen::Index first_row, const Matrix<T>& rows)>;

namespace detail {

inline constexpr Eigen::Index kAttentionRowChunk = 256;

// softmax(q k^T / sqrt(d)) v, evaluated in row chunks so the N x N matrix is
// never materialised unless `retained` asks for it.
template <std::floating_point T>
Matrix<T> attend(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, Matrix<T>* retained,
                 const std::function<void(Eigen::Index, const Matrix<T>&)>& sink) {
  const Eigen::Index n = q.rows();
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Matrix<T> out(n, v.cols());
  const Matrix<T> k_t = k.transpose();
  if (retained != nullptr) {
    *retained = matmul<T>(q, k_t) * inv_scale;
    softmax_rows_inplace(*retained);
    out = matmul<T>(*retained, v);
    if (sink) sink(0, *retained);
    return out;
  }
  Matrix<T> rows;
  for (Eigen::Index first = 0; first < n; first += kAttentionRowChunk) {
    const Eigen::Index count = std::min(kAttentionRowChunk, n - first);
    rows = matmul<T>(q.middleRows(first, count), k_t) * inv_scale;
    softmax_rows_inplace(rows);
    out.middleRows(first, count) = matmul<T>(rows, v);
    if (sink) sink(first, rows);
  }
  return out;
}

}  // namespace detail

// softmax(Q~ K~^T / sqrt(d_k)) V, where Q~ and K~ are rotated by `phases` when
// given. V is never rotated.
template <std::floating_point T>
AttentionOutput<T> scaled_dot_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                        const PhaseTable* phases, bool retain_weights) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols()) {
    fail(ErrorCode::Shape, "scaled_dot_attention: Q/K/V shapes disagree");
  }
  AttentionOutput<T> result;
  Matrix<T> weights;
  if (phases != nullptr) {
    result.values = detail::attend<T>(apply_rotary(q, *phases), apply_rotary(k, *phases), v,
                                      retain_weights ? &weights : nullptr, {});
  } else {
    result.values = detail::attend<T>(q, k, v, retain_weights ? &weights : nullptr, {});
  }
  if (retain_weights) result.weights = std::move(weights);
  return result;
}

// Per-head projections (D x d_h each) plus the shared output projection (D x D).
template <std::floating_point T>
struct MhaWeights {
  std::vector<const Matrix<T>*> wq, wk, wv;
  const Matrix<T>* wo = nullptr;

  int heads() const { return static_cast<int>(wq.size()); }
};

template <std::floating_point T>
struct MhaGrads {
  std::vector<Matrix<T>*> wq, wk, wv;
  Matrix<T>* wo = nullptr;
};

template <std::floating_point T>
struct HeadCache {
  Matrix<T> q_rot, k_rot, v, weights;
};

template <std::floating_point T>
struct MhaCache {
  std::vector<HeadCache<T>> heads;
  Matrix<T> concat;  // N x D, heads side by side
};

// Concat(head_1..head_H) W^O with head_h = Attention(X W^Q_h, X W^K_h, X W^V_h);
// all heads share the same phase table.
template <std::floating_point T>
Matrix<T> multi_head_attention(const Matrix<T>& x, const MhaWeights<T>& w, const PhaseTable* phases,
                               std::type_identity_t<MhaCache<T>>* cache = nullptr, const AttentionRowSink<T>& sink = {}) {
  const int h = w.heads();
  require(h >= 1 && w.wo != nullptr, ErrorCode::Configuration, "multi_head_attention: missing weights");
  const Eigen::Index d_model = x.cols();
  require(d_model % h == 0, ErrorCode::Configuration,
          "latent width " + std::to_string(d_model) + " not divisible by " + std::to_string(h) + " heads");
  const Eigen::Index d_head = d_model / h;
  for (int i = 0; i < h; ++i) {
    require(w.wq[i]->rows() == d_model && w.wq[i]->cols() == d_head && w.wk[i]->rows() == d_model &&
                w.wk[i]->cols() == d_head && w.wv[i]->rows() == d_model && w.wv[i]->cols() == d_head,
            ErrorCode::Shape, "multi_head_attention: head projection shape");
  }
  require(w.wo->rows() == d_model && w.wo->cols() == d_model, ErrorCode::Shape,
          "multi_head_attention: output projection shape");

  Matrix<T> concat(x.rows(), d_model);
  std::vector<HeadCache<T>> local(static_cast<std::size_t>(h));
  auto run_head = [&](std::size_t hi) {
    const int head = static_cast<int>(hi);
    auto& hc = local[hi];
    hc.q_rot = matmul<T>(x, *w.wq[hi]);
    hc.k_rot = matmul<T>(x, *w.wk[hi]);
    hc.v = matmul<T>(x, *w.wv[hi]);
    if (phases != nullptr) {
      hc.q_rot = apply_rotary(hc.q_rot, *phases);
      hc.k_rot = apply_rotary(hc.k_rot, *phases);
    }
    std::function<void(Eigen::Index, const Matrix<T>&)> head_sink;
    if (sink) head_sink = [&](Eigen::Index first, const Matrix<T>& rows) { sink(head, first, rows); };
    concat.middleCols(head * d_head, d_head) =
        detail::attend<T>(hc.q_rot, hc.k_rot, hc.v, cache != nullptr ? &hc.weights : nullptr, head_sink);
  };
  if (sink) {
    for (std::size_t i = 0; i < local.size(); ++i) run_head(i);
  } else {
    parallel_for(local.size(), run_head);
  }

  Matrix<T> out = matmul<T>(concat, *w.wo);
  if (cache != nullptr) {
    cache->heads = std::move(local);
    cache->concat = std::move(concat);
  }
  return out;
}

// Accumulates weight gradients into `grads` and returns dL/dX.
template <std::floating_point T>
Matrix<T> multi_head_attention_backward(const Matrix<T>& x, const MhaWeights<T>& w, const PhaseTable* phases,
                                        const MhaCache<T>& cache, const Matrix<T>& upstream,
                                        MhaGrads<T>& grads) {
  const int h = w.heads();
  const Eigen::Index d_model = x.cols();
  const Eigen::Index d_head = d_model / h;
  require(static_cast<int>(cache.heads.size()) == h, ErrorCode::Usage,
          "attention backward requires a cached forward pass");
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_head));

  grads.wo->noalias() += cache.concat.transpose() * upstream;
  const Matrix<T> d_concat = upstream * w.wo->transpose();

  std::vector<Matrix<T>> dx_parts(static_cast<std::size_t>(h));
  std::vector<Matrix<T>> dq_parts(static_cast<std::size_t>(h)), dk_parts(static_cast<std::size_t>(h)),
      dv_parts(static_cast<std::size_t>(h));
  parallel_for(static_cast<std::size_t>(h), [&](std::size_t hi) {
    const auto& hc = cache.heads[hi];
    const Matrix<T> d_out = d_concat.middleCols(static_cast<Eigen::Index>(hi) * d_head, d_head);
    Matrix<T> d_weights = d_out * hc.v.transpose();
    dv_parts[hi].noalias() = hc.weights.transpose() * d_out;
    // softmax adjoint, row by row: dS = A .* (dA - rowsum(dA .* A))
    for (Eigen::Index i = 0; i < d_weights.rows(); ++i) {
      const T dot = d_weights.row(i).dot(hc.weights.row(i));
      d_weights.row(i) = hc.weights.row(i).cwiseProduct((d_weights.row(i).array() - dot).matrix());
    }
    d_weights *= inv_scale;
    Matrix<T> dq = d_weights * hc.k_rot;
    Matrix<T> dk = d_weights.transpose() * hc.q_rot;
    if (phases != nullptr) {
      dq = apply_rotary_adjoint(dq, *phases);
      dk = apply_rotary_adjoint(dk, *phases);
    }
    dq_parts[hi] = std::move(dq);
    dk_parts[hi] = std::move(dk);
    Matrix<T> dx;
    dx.noalias() = dq_parts[hi] * w.wq[hi]->transpose();
    dx.noalias() += dk_parts[hi] * w.wk[hi]->transpose();
    dx.noalias() += dv_parts[hi] * w.wv[hi]->transpose();
    dx_parts[hi] = std::move(dx);
  });

  Matrix<T> dx = Matrix<T>::Zero(x.rows(), d_model);
  for (int hi = 0; hi < h; ++hi) {
    grads.wq[hi]->noalias() += x.transpose() * dq_parts[hi];
    grads.wk[hi]->noalias() += x.transpose() * dk_parts[hi];
    grads.wv[hi]->noalias() += x.transpose() * dv_parts[hi];
    dx += dx_parts[hi];
  }
  return dx;
}

}  // namespace reto
