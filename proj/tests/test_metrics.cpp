#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "reto/metrics.hpp"
#include "reto/random.hpp"

using namespace reto;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::Usage;
}

// Direct entropy evaluation used as the oracle for histogram tests.
double direct_entropy(const std::vector<double>& row) {
  double h = 0;
  for (double a : row) h -= a * std::log(a + 1e-12);
  return h;
}

}  // namespace

TEST(RelativeL2, Anchors) {
  Matrix<double> truth(1, 2), pred(1, 2);
  truth << 3, 4;
  pred << 3, 0;
  EXPECT_DOUBLE_EQ(relative_l2(pred, truth), 0.8);
  EXPECT_EQ(relative_l2(truth, truth), 0.0);
  EXPECT_EQ(relative_l2(Matrix<double>::Zero(1, 2).eval(), truth), 1.0);
  EXPECT_EQ(code_of([&] { relative_l2(pred, Matrix<double>::Zero(1, 2).eval()); }), ErrorCode::UndefinedMetric);
  EXPECT_EQ(code_of([&] { relative_l2(Matrix<double>::Zero(2, 2).eval(), truth); }), ErrorCode::Shape);
}

TEST(RelativeL2, ScaleCovariantAndPerChannel) {
  Rng rng(4);
  Matrix<double> truth(40, 3), pred(40, 3);
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    truth.data()[i] = rng.uniform(-1, 1);
    pred.data()[i] = truth.data()[i] + 0.1 * rng.uniform(-1, 1);
  }
  const double base = relative_l2(pred, truth);
  // powers of two scale exactly
  for (double alpha : {2.0, -0.25, 1024.0}) {
    const Matrix<double> sp = alpha * pred, st = alpha * truth;
    EXPECT_EQ(relative_l2(sp, st), base);
  }
  const auto per = relative_l2_per_channel(pred, truth);
  ASSERT_EQ(per.size(), 3u);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(per[static_cast<std::size_t>(c)], (pred.col(c) - truth.col(c)).norm() / truth.col(c).norm(), 1e-14);
  }
  const int vel[] = {1, 2};
  const double stacked = std::sqrt((pred.rightCols(2) - truth.rightCols(2)).squaredNorm() / truth.rightCols(2).squaredNorm());
  EXPECT_NEAR(relative_l2(pred, truth, vel), stacked, 1e-14);
}

TEST(ChannelGroups, PressureVelocityOthers) {
  const std::vector<std::string> ch{"u", "p", "t", "w", "v"};
  const auto g = channel_groups(ch);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].name, "pressure");
  EXPECT_EQ(g[0].columns, (std::vector<int>{1}));
  EXPECT_EQ(g[1].name, "velocity");
  EXPECT_EQ(g[1].columns, (std::vector<int>{0, 3, 4}));
  EXPECT_EQ(g[2].name, "t");
}

TEST(ErrorPdf, AllEqualIsSingleBin) {
  const std::vector<double> e(50, 0.3);
  const auto h = abs_error_pdf(e, 10);
  int occupied = 0;
  for (std::size_t i = 0; i < h.bins(); ++i) {
    if (h.densities[i] > 0) {
      ++occupied;
      EXPECT_DOUBLE_EQ(h.densities[i], 1.0 / h.width(i));
    }
  }
  EXPECT_EQ(occupied, 1);
  EXPECT_NEAR(h.integral(), 1.0, 1e-12);
  EXPECT_EQ(code_of([] { abs_error_pdf({}, 10); }), ErrorCode::EmptyDataset);
  EXPECT_EQ(code_of([] { abs_error_pdf(std::vector<double>{-1.0}, 10); }), ErrorCode::Domain);
}

TEST(ErrorPdf, UniformSamplesGiveFlatDensity) {
  Rng rng(21);
  std::vector<double> e(100000);
  for (auto& v : e) v = rng.uniform();
  const auto h = density_histogram(e, 10, 0.0, 1.0);
  for (double d : h.densities) EXPECT_NEAR(d, 1.0, 0.05);
  EXPECT_NEAR(h.integral(), 1.0, 1e-6);
}

TEST(ErrorPdf, IntegratesToOneOnRandomInputs) {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> e(1 + rng.below(500));
    for (auto& v : e) v = std::abs(rng.uniform(-1, 1)) * std::pow(10.0, rng.uniform(-3, 2));
    EXPECT_NEAR(abs_error_pdf(e, 64).integral(), 1.0, 1e-6);
  }
}

TEST(Entropy, Anchors) {
  const std::vector<double> uniform(100, 0.01);
  const auto u = attention_entropy(uniform);
  EXPECT_NEAR(u.normalized, 1.0, 1e-9);
  EXPECT_LE(u.normalized, 1.0 + 1e-9);

  std::vector<double> one_hot(100, 0.0);
  one_hot[37] = 1.0;
  EXPECT_NEAR(attention_entropy(one_hot).normalized, 0.0, 1e-9);

  const auto half = attention_entropy(std::vector<double>{0.5, 0.5});
  EXPECT_NEAR(half.entropy, std::log(2.0), 1e-11);
  EXPECT_NEAR(half.normalized, 1.0, 1e-11);

  EXPECT_EQ(code_of([] { attention_entropy(std::vector<double>{1.0}); }), ErrorCode::Domain);
  EXPECT_EQ(code_of([] { attention_entropy(std::vector<double>{0.7, 0.7}); }), ErrorCode::Domain);
  EXPECT_EQ(code_of([] { attention_entropy(std::vector<double>{1.5, -0.5}); }), ErrorCode::Domain);
}

TEST(Entropy, BoundsAndMixingMonotonicity) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> row(n);
    for (auto& a : row) a = std::pow(rng.uniform(), 4.0);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& a : row) a /= s;
    double previous = -1;
    for (int k = 0; k <= 20; ++k) {
      const double t = k / 20.0;
      std::vector<double> mixed(n);
      for (std::size_t j = 0; j < n; ++j) mixed[j] = (1 - t) * row[j] + t / static_cast<double>(n);
      const auto e = attention_entropy(mixed);
      EXPECT_GE(e.normalized, 0.0);
      EXPECT_LE(e.normalized, 1.0 + 1e-9);
      EXPECT_GE(e.entropy, previous - 1e-12);
      previous = e.entropy;
    }
  }
}

TEST(Entropy, CaptureProfileMatchesDirectEvaluation) {
  AttentionCapture<double> cap;
  Matrix<double> w(3, 3);
  w << 0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  cap.weights = {{w}};
  const auto tables = entropy_profile(cap, 4);
  ASSERT_EQ(tables.size(), 1u);
  ASSERT_EQ(tables[0].values.size(), 3u);
  for (int r = 0; r < 3; ++r) {
    const std::vector<double> row{w(r, 0), w(r, 1), w(r, 2)};
    EXPECT_NEAR(tables[0].values[static_cast<std::size_t>(r)], direct_entropy(row) / std::log(3.0), 1e-15);
  }
  // bins of width 0.25: 0.9372 -> bin 3, 0 -> bin 0, 1 -> bin 3
  EXPECT_NEAR(tables[0].histogram.densities[0], (1.0 / 3) / 0.25, 1e-12);
  EXPECT_NEAR(tables[0].histogram.densities[3], (2.0 / 3) / 0.25, 1e-12);
  EXPECT_EQ(tables[0].resolution, 3);

  EXPECT_EQ(code_of([] { entropy_profile(AttentionCapture<double>{}); }), ErrorCode::Usage);
}

TEST(Entropy, ZeroQueryKeyWeightsGiveUniformAttention) {
  ModelConfig cfg;
  cfg.num_blocks = 2;
  cfg.num_heads = 2;
  cfg.latent_dim = 8;
  cfg.per_axis_dim = 4;
  cfg.encoder_hidden = 6;
  const Architecture arch(cfg);
  auto params = init_parameters<double>(cfg, 3);
  for (auto& p : params) {
    if (p.name.find(".wq") != std::string::npos || p.name.find(".wk") != std::string::npos) p.value.setZero();
  }
  Rng rng(2);
  Matrix<double> coords(40, 3);
  for (Eigen::Index i = 0; i < coords.size(); ++i) coords.data()[i] = rng.uniform(-1, 1);
  EntropySelector sel;
  sel.blocks = {0, 1};
  sel.pool_heads = false;
  const auto tables = entropy_profile(coords, params, arch, sel);
  ASSERT_EQ(tables.size(), 4u);
  for (const auto& t : tables) {
    EXPECT_EQ(t.resolution, 40);
    for (double v : t.values) EXPECT_NEAR(v, 1.0, 1e-9);
  }
  const auto pooled = entropy_profile(coords, params, arch);
  ASSERT_EQ(pooled.size(), 1u);
  EXPECT_EQ(pooled[0].block, 1);
  EXPECT_EQ(pooled[0].head, -1);
  EXPECT_EQ(pooled[0].values.size(), 80u);
}

TEST(Quartiles, MedianAndRanking) {
  const auto q = quartiles({0.5, 0.1, 0.4, 0.2, 0.3});
  EXPECT_DOUBLE_EQ(q.median, 0.3);
  EXPECT_DOUBLE_EQ(q.min, 0.1);
  EXPECT_DOUBLE_EQ(q.q1, 0.2);
  EXPECT_DOUBLE_EQ(q.q3, 0.4);
  EXPECT_DOUBLE_EQ(q.max, 0.5);

  const auto same = quartiles(std::vector<double>(7, 0.25));
  EXPECT_EQ(same.min, same.max);
  EXPECT_EQ(same.q1, same.q3);

  std::vector<SampleError> errs{{"c", 0.3}, {"a", 0.1}, {"e", 0.5}, {"b", 0.2}, {"d", 0.4}};
  const auto d = per_sample_error_distribution(errs);
  EXPECT_EQ(d.best(2), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(d.worst(2), (std::vector<std::string>{"e", "d"}));
  const auto again = per_sample_error_distribution(errs);
  EXPECT_EQ(sample_errors_csv(again.ranked), sample_errors_csv(d.ranked));
  EXPECT_EQ(sample_errors_csv(d.ranked).substr(0, 16), "sample_id,rel_l2");
}

TEST(CsvOutput, HistogramSchema) {
  const auto h = density_histogram(std::vector<double>{0.1, 0.6}, 2, 0.0, 1.0);
  EXPECT_EQ(histogram_csv(h), "bin_center,density\n0.25,1\n0.75,1\n");
}
