#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "reto/error.hpp"
#include "reto/linalg.hpp"
#include "reto/model.hpp"

namespace reto {

// ||pred - truth||_2 / ||truth||_2 over all entries.
template <std::floating_point T>
double relative_l2(const Matrix<T>& pred, const Matrix<T>& truth) {
  require_same_shape(pred.rows(), pred.cols(), truth.rows(), truth.cols(), "relative_l2");
  long double num = 0, den = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const long double d = static_cast<long double>(pred.data()[i]) - truth.data()[i];
    num += d * d;
    den += static_cast<long double>(truth.data()[i]) * truth.data()[i];
  }
  require(den > 0, ErrorCode::UndefinedMetric, "relative L2 undefined for an all-zero reference field");
  return static_cast<double>(std::sqrt(num / den));
}

// Relative L2 restricted to the given columns (treated as one stacked field).
template <std::floating_point T>
double relative_l2(const Matrix<T>& pred, const Matrix<T>& truth, std::span<const int> columns) {
  require_same_shape(pred.rows(), pred.cols(), truth.rows(), truth.cols(), "relative_l2");
  long double num = 0, den = 0;
  for (Eigen::Index i = 0; i < truth.rows(); ++i) {
    for (int c : columns) {
      const long double d = static_cast<long double>(pred(i, c)) - truth(i, c);
      num += d * d;
      den += static_cast<long double>(truth(i, c)) * truth(i, c);
    }
  }
  require(den > 0, ErrorCode::UndefinedMetric, "relative L2 undefined for an all-zero reference field");
  return static_cast<double>(std::sqrt(num / den));
}

template <std::floating_point T>
std::vector<double> relative_l2_per_channel(const Matrix<T>& pred, const Matrix<T>& truth) {
  std::vector<double> out;
  for (int c = 0; c < truth.cols(); ++c) {
    const int cols[] = {c};
    out.push_back(relative_l2(pred, truth, cols));
  }
  return out;
}

// Field families reported together: "pressure" (p) and "velocity" (u, v, w);
// any other channel forms its own group.
struct ChannelGroup {
  std::string name;
  std::vector<int> columns;
};

inline std::vector<ChannelGroup> channel_groups(std::span<const std::string> channels) {
  std::vector<ChannelGroup> groups;
  ChannelGroup pressure{"pressure", {}}, velocity{"velocity", {}};
  std::vector<ChannelGroup> others;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const auto& c = channels[i];
    if (c == "p") {
      pressure.columns.push_back(static_cast<int>(i));
    } else if (c == "u" || c == "v" || c == "w") {
      velocity.columns.push_back(static_cast<int>(i));
    } else {
      others.push_back({c, {static_cast<int>(i)}});
    }
  }
  if (!pressure.columns.empty()) groups.push_back(pressure);
  if (!velocity.columns.empty()) groups.push_back(velocity);
  groups.insert(groups.end(), others.begin(), others.end());
  return groups;
}

struct Histogram {
  std::vector<double> edges;      // bins + 1
  std::vector<double> densities;  // bins; sum(density * width) = 1

  std::size_t bins() const { return densities.size(); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double integral() const {
    double s = 0;
    for (std::size_t i = 0; i < bins(); ++i) s += densities[i] * width(i);
    return s;
  }
};

// Density histogram over [lo, hi] with equal bins; values at hi land in the last bin.
inline Histogram density_histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  require(!values.empty(), ErrorCode::EmptyDataset, "histogram of an empty sample");
  require(bins >= 1, ErrorCode::Configuration, "histogram needs at least one bin");
  require(hi > lo, ErrorCode::Domain, "histogram range is empty");
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  std::vector<std::size_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    auto idx = static_cast<std::ptrdiff_t>(std::floor((v - lo) / width));
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++counts[static_cast<std::size_t>(idx)];
  }
  h.densities.resize(bins);
  const auto n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < bins; ++i) h.densities[i] = static_cast<double>(counts[i]) / (n * h.width(i));
  return h;
}

// PDF of absolute errors over [0, max error].
inline Histogram abs_error_pdf(std::span<const double> errors, std::size_t bins = 64) {
  require(!errors.empty(), ErrorCode::EmptyDataset, "abs_error_pdf: no errors");
  double hi = 0;
  for (double e : errors) {
    require(std::isfinite(e) && e >= 0, ErrorCode::Domain, "abs_error_pdf expects finite non-negative errors");
    hi = std::max(hi, e);
  }
  if (hi == 0) hi = 1;  // all-zero errors: one occupied bin at the origin
  return density_histogram(errors, bins, 0.0, hi);
}

struct EntropyValue {
  double entropy = 0;     // H_i = -sum_j A_ij ln(A_ij + eps)
  double normalized = 0;  // H_i / ln N
};

inline constexpr double kEntropyEpsilon = 1e-12;

template <typename Range>
EntropyValue attention_entropy(const Range& row, double epsilon = kEntropyEpsilon) {
  const auto n = static_cast<std::size_t>(std::size(row));
  require(n >= 2, ErrorCode::Domain, "attention entropy needs N >= 2 (ln 1 = 0)");
  using Element = std::remove_cvref_t<decltype(*std::begin(row))>;
  double sum = 0, h = 0;
  for (const auto a : row) {
    const auto v = static_cast<double>(a);
    require(v >= 0, ErrorCode::Domain, "attention weights must be non-negative");
    sum += v;
    h -= v * std::log(v + epsilon);
  }
  // 1e-6 plus the rounding a single-precision row can accumulate over N entries.
  const double tolerance = 1e-6 + static_cast<double>(n) * std::numeric_limits<Element>::epsilon();
  require(std::abs(sum - 1.0) <= tolerance, ErrorCode::Domain, "attention row does not sum to 1");
  return {h, h / std::log(static_cast<double>(n))};
}

inline EntropyValue attention_entropy(std::span<const double> row, double epsilon = kEntropyEpsilon) {
  return attention_entropy<std::span<const double>>(row, epsilon);
}

// Five-number summary with linear interpolation between order statistics.
struct QuartileSummary {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline QuartileSummary quartiles(std::vector<double> values) {
  require(!values.empty(), ErrorCode::EmptyDataset, "quartiles of an empty sample");
  std::sort(values.begin(), values.end());
  return {values.front(), quantile_sorted(values, 0.25), quantile_sorted(values, 0.5),
          quantile_sorted(values, 0.75), values.back()};
}

struct SampleError {
  std::string sample_id;
  double rel_l2 = 0;
};

struct ErrorDistribution {
  QuartileSummary summary;
  std::vector<SampleError> ranked;  // ascending error; ties broken by id
  std::vector<std::string> best(std::size_t k) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(ranked[i].sample_id);
    return out;
  }
  std::vector<std::string> worst(std::size_t k) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(ranked[ranked.size() - 1 - i].sample_id);
    return out;
  }
};

inline ErrorDistribution per_sample_error_distribution(std::vector<SampleError> errors) {
  require(!errors.empty(), ErrorCode::EmptyDataset, "error distribution of an empty split");
  std::vector<double> values;
  for (const auto& e : errors) values.push_back(e.rel_l2);
  std::sort(errors.begin(), errors.end(), [](const SampleError& a, const SampleError& b) {
    return a.rel_l2 != b.rel_l2 ? a.rel_l2 < b.rel_l2 : a.sample_id < b.sample_id;
  });
  return {quartiles(std::move(values)), std::move(errors)};
}

// ---------------------------------------------------------------------------
// Attention entropy profiles.

struct EntropySelector {
  std::vector<int> blocks;  // empty: final block only
  bool pool_heads = true;   // one histogram over all heads of a block
  std::size_t bins = 64;
};

struct EntropyTable {
  int block = 0;
  int head = -1;  // -1 when heads are pooled
  Eigen::Index resolution = 0;
  std::vector<double> values;  // normalized entropy per query row (and head when pooled)
  Histogram histogram;

  double median() const { return quartiles(values).median; }
};

// Streams normalized entropy for every attention row of the selected blocks
// through one forward pass; never holds a full N x N matrix.
template <std::floating_point T>
std::vector<EntropyTable> entropy_profile(const Matrix<T>& normalized_coords, const ParameterStore<T>& params,
                                          const Architecture& arch, const EntropySelector& selector = {}) {
  require(normalized_coords.rows() >= 2, ErrorCode::Domain, "entropy profile needs at least 2 points");
  std::vector<int> blocks = selector.blocks;
  if (blocks.empty()) blocks.push_back(arch.config.num_blocks - 1);
  for (int b : blocks) require(b >= 0 && b < arch.config.num_blocks, ErrorCode::Bounds, "entropy block out of range");
  const int heads = arch.config.num_heads;
  std::map<std::pair<int, int>, std::vector<double>> collected;
  for (int b : blocks) {
    for (int h = 0; h < heads; ++h) {
      collected[{b, h}].assign(static_cast<std::size_t>(normalized_coords.rows()), 0.0);
    }
  }
  AttentionObserver<T> observer = [&](int block, int head, Eigen::Index first, const Matrix<T>& rows) {
    auto it = collected.find({block, head});
    if (it == collected.end()) return;
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      it->second[static_cast<std::size_t>(first + r)] = attention_entropy(rows.row(r)).normalized;
    }
  };
  forward_normalized<T>(normalized_coords, params, arch, nullptr, observer);

  std::vector<EntropyTable> tables;
  for (int b : blocks) {
    if (selector.pool_heads) {
      EntropyTable t{b, -1, normalized_coords.rows(), {}, {}};
      for (int h = 0; h < heads; ++h) {
        const auto& v = collected[{b, h}];
        t.values.insert(t.values.end(), v.begin(), v.end());
      }
      t.histogram = density_histogram(t.values, selector.bins, 0.0, 1.0);
      tables.push_back(std::move(t));
    } else {
      for (int h = 0; h < heads; ++h) {
        EntropyTable t{b, h, normalized_coords.rows(), collected[{b, h}], {}};
        t.histogram = density_histogram(t.values, selector.bins, 0.0, 1.0);
        tables.push_back(std::move(t));
      }
    }
  }
  return tables;
}

// Same statistic from explicitly retained weights; `capture` must be populated.
template <std::floating_point T>
std::vector<EntropyTable> entropy_profile(const AttentionCapture<T>& capture, std::size_t bins = 64) {
  require(!capture.weights.empty(), ErrorCode::Usage, "attention weights were not retained");
  std::vector<EntropyTable> tables;
  for (std::size_t b = 0; b < capture.weights.size(); ++b) {
    for (std::size_t h = 0; h < capture.weights[b].size(); ++h) {
      const auto& w = capture.weights[b][h];
      EntropyTable t{static_cast<int>(b), static_cast<int>(h), w.rows(), {}, {}};
      for (Eigen::Index r = 0; r < w.rows(); ++r) t.values.push_back(attention_entropy(w.row(r)).normalized);
      t.histogram = density_histogram(t.values, bins, 0.0, 1.0);
      tables.push_back(std::move(t));
    }
  }
  return tables;
}

// ---------------------------------------------------------------------------
// Text / CSV output. Fixed formatting so reruns produce identical bytes.

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "bin_center,density\n";
  for (std::size_t i = 0; i < h.bins(); ++i) os << format_number(h.center(i)) << ',' << format_number(h.densities[i]) << '\n';
  return os.str();
}

inline std::string sample_errors_csv(std::span<const SampleError> errors) {
  std::ostringstream os;
  os << "sample_id,rel_l2\n";
  for (const auto& e : errors) os << e.sample_id << ',' << format_number(e.rel_l2) << '\n';
  return os.str();
}

}  // namespace reto
