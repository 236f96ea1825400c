#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mbrain/graph.hpp"
#include "mbrain/synthetic.hpp"
#include "test_util.hpp"

using namespace mbrain;
using mbrain::testing::random_matrix;

namespace {

double brute_cosine(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    dot += a(r, i) * b(r, j);
    na += a(r, i) * a(r, i);
    nb += b(r, j) * b(r, j);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::size_t nonzeros(const Matrix& m) {
  std::size_t n = 0;
  for (double v : m.data) n += v != 0.0;
  return n;
}

SegmentSeries series_of(const Recording& rec, std::size_t window) { return segment_recording(rec, window); }

Recording slice(const Recording& rec, std::size_t from, std::size_t to) {
  Recording out = rec;
  out.samples = Matrix(to - from, rec.channels());
  out.point_labels = BinaryMatrix(to - from, rec.channels());
  for (std::size_t l = from; l < to; ++l)
    for (std::size_t c = 0; c < rec.channels(); ++c) {
      out.samples(l - from, c) = rec.samples(l, c);
      out.point_labels(l - from, c) = rec.point_labels(l, c);
    }
  return out;
}

}  // namespace

TEST(Cosine, IdenticalAndOrthogonalColumns) {
  const Matrix m(2, 3, {1, 1, 0, 0, 0, 1});
  const Matrix cm = cosine_matrix(m);
  EXPECT_DOUBLE_EQ(cm(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(cm(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(cm(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(cm(0, 0), 1.0);
}

TEST(Cosine, MatchesBruteForceOnRandomFixture) {
  Rng rng(3);
  const Matrix m = random_matrix(8, 3, rng);
  const Matrix cm = cosine_matrix(m);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(cm(i, j), brute_cosine(m, i, m, j), 1e-12);
}

TEST(Cosine, ZeroColumnGetsZeroRowColumnAndDiagonal) {
  Rng rng(4);
  Matrix m = random_matrix(10, 3, rng);
  for (std::size_t r = 0; r < 10; ++r) m(r, 1) = 0.0;
  const Matrix cm = cosine_matrix(m);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(cm(1, k), 0.0);
    EXPECT_EQ(cm(k, 1), 0.0);
  }
  EXPECT_DOUBLE_EQ(cm(0, 0), 1.0);
}

TEST(Cosine, ScaleInvariantPerChannel) {
  Rng rng(5);
  const Matrix m = random_matrix(50, 4, rng);
  Matrix scaled = m;
  const double factor[4] = {0.01, 3.0, 250.0, 1.0};
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t c = 0; c < 4; ++c) scaled(r, c) *= factor[c];
  const Matrix a = cosine_matrix(m), b = cosine_matrix(scaled);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a.data[k], b.data[k], 1e-10);
}

TEST(CoarsePrior, SingleSegmentEqualsItsCosineMatrix) {
  Rng rng(6);
  const Matrix s = random_matrix(20, 4, rng);
  EXPECT_EQ(coarse_prior({&s}).a_coarse.data, cosine_matrix(s).data);
}

TEST(CoarsePrior, TwoSegmentsAverageAndStaySymmetric) {
  Rng rng(7);
  const Matrix s1 = random_matrix(20, 4, rng), s2 = random_matrix(20, 4, rng);
  const Matrix p = coarse_prior({&s1, &s2}).a_coarse;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(p(i, j), 0.5 * (brute_cosine(s1, i, s1, j) + brute_cosine(s2, i, s2, j)), 1e-12);
      EXPECT_EQ(p(i, j), p(j, i));
      EXPECT_LE(std::abs(p(i, j)), 1.0 + 1e-12);
    }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p(i, i), 1.0, 1e-12);
}

TEST(CoarsePrior, EmptyInputThrows) { EXPECT_THROW(coarse_prior(std::vector<const Matrix*>{}), std::invalid_argument); }

TEST(Threshold, IdempotentAndMonotoneInTheta) {
  Rng rng(8);
  const Matrix a = random_matrix(6, 6, rng);
  for (double th : {0.0, 0.3, 0.5, 0.9}) {
    const Matrix once = threshold_filter(a, th);
    EXPECT_EQ(threshold_filter(once, th).data, once.data);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(once.data[k] == 0.0 || (once.data[k] >= th && once.data[k] == a.data[k]));
  }
  std::size_t prev = nonzeros(threshold_filter(a, 0.0));
  for (double th = 0.05; th <= 1.0; th += 0.05) {
    const std::size_t n = nonzeros(threshold_filter(a, th));
    EXPECT_LE(n, prev);
    prev = n;
  }
}

TEST(FineGraph, EvalModePassesThePriorThroughTheThreshold) {
  Rng rng(9);
  const SigmaNetwork net(5, rng);
  CoarsePrior prior{Matrix(2, 2, {1.0, 0.8, 0.3, 1.0})};
  const Matrix codes = random_matrix(2, 5, rng);
  const FineGraph g = sample_fine_graph(codes, prior, 0.5, GraphMode::eval, rng, net);
  EXPECT_EQ(g.a_t(0, 1), 0.8);
  EXPECT_EQ(g.a_t(1, 0), 0.0);
  for (double n : g.noise.data) EXPECT_EQ(n, 0.0);
  const FineGraph again = sample_fine_graph(codes, prior, 0.5, GraphMode::eval, rng, net);
  EXPECT_EQ(again.a_t.data, g.a_t.data);
}

TEST(FineGraph, TrainModeReparameterizationIsExact) {
  Rng rng(10);
  const SigmaNetwork net(6, rng);
  const Matrix seg = random_matrix(30, 5, rng);
  const CoarsePrior prior = coarse_prior({&seg});
  const Matrix codes = random_matrix(5, 6, rng);
  Rng noise_rng(11);
  const FineGraph g = sample_fine_graph(codes, prior, 0.5, GraphMode::train, noise_rng, net);
  double noise_mass = 0;
  for (std::size_t k = 0; k < g.a_fine.size(); ++k) {
    EXPECT_EQ(g.a_fine.data[k], prior.a_coarse.data[k] + g.sigma.data[k] * g.noise.data[k]);
    EXPECT_GE(g.sigma.data[k], 0.0);
    EXPECT_EQ(g.a_t.data[k], g.a_fine.data[k] >= 0.5 ? g.a_fine.data[k] : 0.0);
    noise_mass += std::abs(g.noise.data[k]);
  }
  EXPECT_GT(noise_mass, 0.0);
  Rng same(11);
  EXPECT_EQ(sample_fine_graph(codes, prior, 0.5, GraphMode::train, same, net).a_fine.data, g.a_fine.data);
}

TEST(FineGraph, SigmaMatchesSoftplusOfHandComputedMlp) {
  Rng rng(12);
  const SigmaNetwork net(3, rng);
  const Matrix codes = random_matrix(2, 3, rng);
  CoarsePrior prior{Matrix(2, 2, 0.0)};
  const FineGraph g = sample_fine_graph(codes, prior, 0.5, GraphMode::eval, rng, net);
  const Matrix& w1 = net.mlp.first.weight->value;
  const Matrix& b1 = net.mlp.first.bias->value;
  const Matrix& w2 = net.mlp.second.weight->value;
  const Matrix& b2 = net.mlp.second.bias->value;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> x;
      for (std::size_t k = 0; k < 3; ++k) x.push_back(codes(i, k));
      for (std::size_t k = 0; k < 3; ++k) x.push_back(codes(j, k));
      double out = b2(0, 0);
      for (std::size_t h = 0; h < SigmaNetwork::kHidden; ++h) {
        double z = b1(0, h);
        for (std::size_t k = 0; k < 6; ++k) z += x[k] * w1(k, h);
        out += std::max(z, 0.0) * w2(h, 0);
      }
      EXPECT_NEAR(g.sigma(i, j), std::log1p(std::exp(out)), 1e-12);
    }
}

TEST(FineGraph, NonFiniteSigmaNamesThePair) {
  Rng rng(13);
  SigmaNetwork net(2, rng);
  net.mlp.second.bias->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CoarsePrior prior{Matrix(2, 2, 0.0)};
  try {
    sample_fine_graph(random_matrix(2, 2, rng), prior, 0.5, GraphMode::train, rng, net);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("pair (0, 0)"), std::string::npos) << e.what();
  }
}

TEST(FineGraph, ThetaOutsideUnitIntervalRejected) {
  Rng rng(14);
  const SigmaNetwork net(2, rng);
  CoarsePrior prior{Matrix(2, 2, 0.0)};
  EXPECT_THROW(sample_fine_graph(random_matrix(2, 2, rng), prior, 1.5, GraphMode::eval, rng, net), std::invalid_argument);
}

TEST(Delayed, ReplicatedSinusoidGivesAllOnes) {
  std::vector<Matrix> segs;
  for (int t = 0; t < 10; ++t) {
    Matrix s(50, 3);
    for (std::size_t r = 0; r < 50; ++r)
      for (std::size_t c = 0; c < 3; ++c) s(r, c) = std::sin(0.3 * static_cast<double>(r) + 0.1);
    segs.push_back(s);
  }
  const Matrix b = delayed_correlation_matrix(segs, 2, 1, 7);
  EXPECT_EQ(b.rows, 7u);
  EXPECT_EQ(b.cols, 3u);
  for (double v : b.data) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Delayed, MatchesBruteForceAndChecksRange) {
  Rng rng(15);
  std::vector<Matrix> segs;
  for (int t = 0; t < 6; ++t) segs.push_back(random_matrix(12, 4, rng));
  const Matrix b = delayed_correlation_matrix(segs, 1, 2, 4);
  for (std::size_t k = 1; k <= 4; ++k)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b(k - 1, j), brute_cosine(segs[1], 2, segs[1 + k], j), 1e-12);
  EXPECT_NO_THROW(delayed_correlation_matrix(segs, 0, 0, 5));
  EXPECT_THROW(delayed_correlation_matrix(segs, 1, 0, 5), std::out_of_range);
  EXPECT_THROW(delayed_correlation_matrix(segs, 0, 4, 1), std::out_of_range);
}

TEST(ShiftReport, SelfComparisonIsZero) {
  SynthConfig cfg;
  cfg.seed = 21;
  const auto s = series_of(generate_background(cfg), 250);
  const auto r = correlation_shift_report(s, s);
  EXPECT_EQ(max_abs(r.difference), 0.0);
}

TEST(ShiftReport, NormalSpansAgreeAndEventSpansDiffer) {
  SynthConfig cfg;
  cfg.length = 7500;
  cfg.propagation_graph = chain_graph(cfg.channels, 3);
  cfg.event_len_min = cfg.event_len_max = 2000;
  cfg.event_seed_channels = {0};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    cfg.seed = seed;
    const Recording bg = generate_background(cfg);
    const auto a = series_of(slice(bg, 0, 2500), 250);
    const auto b = series_of(slice(bg, 2500, 5000), 250);
    const double normal_gap = max_abs(correlation_shift_report(a, b).difference);
    EXPECT_LT(normal_gap, 0.15) << "seed " << seed;

    SynthConfig ev = cfg;
    ev.length = 2500;
    const Recording bg_ev = slice(bg, 5000, 7500);
    const auto injected = inject_events(bg_ev, ev).recording;
    const double event_gap = max_abs(correlation_shift_report(a, series_of(injected, 250)).difference);
    EXPECT_GT(event_gap, normal_gap) << "seed " << seed;
  }
}

TEST(ShiftReport, ChannelMismatchThrows) {
  Rng rng(16);
  SegmentSeries a, b;
  a.segments = {random_matrix(5, 3, rng)};
  b.segments = {random_matrix(5, 4, rng)};
  EXPECT_THROW(correlation_shift_report(a, b), ShapeError);
}

TEST(Export, MatrixCsvHasHeaderAndRoundTrippableCells) {
  const Matrix m(2, 2, {0.1, -2.5, 1.0 / 3.0, 4.0});
  const std::string csv = matrix_csv(m, {"a", "b"});
  const auto rows = std::string(csv.begin(), csv.begin() + static_cast<long>(csv.find('\n')));
  EXPECT_EQ(rows, "a,b");
  EXPECT_NE(csv.find("0.3333333333333333"), std::string::npos);
  EXPECT_EQ(edge_list_csv(Matrix(2, 2, {0.9, 0.7, 0.0, 0.6}), {"a", "b"}), "i,j,weight\na,b,0.7\n");
  Rng rng(4);
  for (int k = 0; k < 1000; ++k) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform() * 20 - 10);
    EXPECT_EQ(std::strtod(format_number(v).c_str(), nullptr), v);
  }
}
