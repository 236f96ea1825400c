#include <gtest/gtest.h>

#include <cmath>

#include "mbrain/neural.hpp"
#include "mbrain/optim.hpp"
#include "test_util.hpp"

using namespace mbrain;
using mbrain::testing::random_matrix;

namespace {

ModelConfig tiny(std::size_t channels = 3) {
  ModelConfig c;
  c.channels = channels;
  c.window = 60;
  c.d = 4;
  c.d_ar = 5;
  c.k1_max = 2;
  c.head_hidden = 6;
  return c;
}

Matrix permute_cols(const Matrix& m, const std::vector<std::size_t>& pi) {
  Matrix out(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) out(r, pi[c]) = m(r, c);
  return out;
}

// Row block of channel i in a [(C) x T] layout with width w.
std::vector<double> code_rows(const Matrix& z, std::size_t i, std::size_t t_len) {
  std::vector<double> out(z.data.begin() + static_cast<long>(i * t_len * z.cols),
                          z.data.begin() + static_cast<long>((i + 1) * t_len * z.cols));
  return out;
}

}  // namespace

TEST(Encoder, WindowOf250GivesTwentyFiveSteps) {
  ModelConfig c;
  EXPECT_EQ(encoded_length(c), 25u);
  EXPECT_EQ(downsample_factor(c), 10u);
}

TEST(Encoder, ShortWindowIsAConfigError) {
  ModelConfig c = tiny();
  c.k1_max = 8;  // T = 6 < k1_max + 2
  EXPECT_THROW(MBrainModel(c, 1), ConfigError);
}

TEST(Encoder, ChannelPermutationIsEquivariant) {
  const MBrainModel model(tiny(), 3);
  Rng rng(4);
  const Matrix seg = random_matrix(60, 3, rng);
  const std::vector<std::size_t> pi{2, 0, 1};
  const Matrix z = model.encode({seg})->value;
  const Matrix zp = model.encode({permute_cols(seg, pi)})->value;
  const std::size_t t = model.steps();
  // GEMM blocking can reorder sums by row position, so equality is up to rounding.
  for (std::size_t i = 0; i < 3; ++i) {
    const auto a = code_rows(z, i, t), b = code_rows(zp, pi[i], t);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(Encoder, ZeroInputGivesIdenticalChannels) {
  const MBrainModel model(tiny(), 5);
  const Matrix z = model.encode({Matrix(60, 3)})->value;
  const std::size_t t = model.steps();
  EXPECT_EQ(code_rows(z, 0, t), code_rows(z, 1, t));
  EXPECT_EQ(code_rows(z, 0, t), code_rows(z, 2, t));
  EXPECT_EQ(z.data, model.encode({Matrix(60, 3)})->value.data);
}

TEST(Encoder, WrongSegmentShapeThrows) {
  const MBrainModel model(tiny(), 6);
  EXPECT_THROW(model.encode({Matrix(59, 3)}), ShapeError);
}

TEST(Summarizer, IsCausal) {
  const MBrainModel model(tiny(), 7);
  Rng rng(8);
  const std::size_t t_len = model.steps();
  Matrix z = random_matrix(3 * t_len, 4, rng);
  const auto c1 = model.contextualize(ag::constant(z), 3);
  const std::size_t tau = 2;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) z((i * t_len) + tau + 1, k) += 10.0;
  const auto c2 = model.contextualize(ag::constant(z), 3);
  for (std::size_t t = 0; t <= tau; ++t) EXPECT_EQ(c1[t]->value.data, c2[t]->value.data);
  EXPECT_NE(c1[tau + 1]->value.data, c2[tau + 1]->value.data);
}

TEST(Summarizer, SingleStepMatchesManualCell) {
  Rng rng(9);
  const Lstm lstm(3, 2, rng);
  const Matrix x = random_matrix(1, 3, rng);
  const auto h = lstm.run(ag::constant(x), 1, 1)[0]->value;
  const Matrix& wi = lstm.w_input->value;
  const Matrix& b = lstm.bias->value;
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  for (std::size_t k = 0; k < 2; ++k) {
    double g[4];
    for (std::size_t gate = 0; gate < 4; ++gate) {
      g[gate] = b(0, gate * 2 + k);
      for (std::size_t c = 0; c < 3; ++c) g[gate] += x(0, c) * wi(c, gate * 2 + k);
    }
    const double cell = sig(g[0]) * std::tanh(g[2]);  // previous cell state is zero
    EXPECT_NEAR(h(0, k), sig(g[3]) * std::tanh(cell), 1e-12);
  }
}

TEST(Aggregate, SingleNeighborWeightCancels) {
  Rng rng(10);
  const Matrix c = random_matrix(3, 4, rng);
  const auto theta = ag::constant(random_matrix(4, 4, rng));
  Matrix a(3, 3);
  a(0, 2) = 0.7;
  const auto out = aggregate_neighbors(ag::constant(c), ag::constant(a), theta, 3)->value;
  for (std::size_t k = 0; k < 4; ++k) {
    double v = 0;
    for (std::size_t m = 0; m < 4; ++m) v += c(2, m) * theta->value(m, k);
    EXPECT_NEAR(out(0, k), std::max(v, 0.0), 1e-12);
    EXPECT_EQ(out(1, k), 0.0);  // isolated node
  }
}

TEST(Aggregate, MatchesDenseOracleAndIsScaleInvariant) {
  Rng rng(11);
  const Matrix c = random_matrix(3, 4, rng);
  const Matrix theta = random_matrix(4, 4, rng);
  Matrix a = random_matrix(3, 3, rng);
  for (double& v : a.data) v = std::abs(v);
  const auto out = aggregate_neighbors(ag::constant(c), ag::constant(a), ag::constant(theta), 3)->value;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> mean(4, 0.0);
    double w = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      if (j == i) continue;
      w += a(i, j);
      for (std::size_t m = 0; m < 4; ++m) mean[m] += a(i, j) * c(j, m);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      double v = 0;
      for (std::size_t m = 0; m < 4; ++m) v += mean[m] / w * theta(m, k);
      EXPECT_NEAR(out(i, k), std::max(v, 0.0), 1e-10);
    }
  }
  Matrix a3 = a;
  for (double& v : a3.data) v *= 3;
  const auto out3 = aggregate_neighbors(ag::constant(c), ag::constant(a3), ag::constant(theta), 3)->value;
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out.data[k], out3.data[k], 1e-12);
}

TEST(Aggregate, NeighborRelabelingPreservesOutput) {
  Rng rng(12);
  const Matrix c = random_matrix(4, 3, rng);
  const Matrix theta = random_matrix(3, 3, rng);
  Matrix a = random_matrix(4, 4, rng);
  for (double& v : a.data) v = std::abs(v);
  // Swap channels 2 and 3 in both the codes and the adjacency columns for row 0.
  Matrix c2 = c, a2 = a;
  for (std::size_t m = 0; m < 3; ++m) std::swap(c2(2, m), c2(3, m));
  std::swap(a2(0, 2), a2(0, 3));
  const auto o1 = aggregate_neighbors(ag::constant(c), ag::constant(a), ag::constant(theta), 4)->value;
  const auto o2 = aggregate_neighbors(ag::constant(c2), ag::constant(a2), ag::constant(theta), 4)->value;
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(o1(0, k), o2(0, k), 1e-12);
}

TEST(Pool, MeanOverTime) {
  Rng rng(13);
  std::vector<ag::Var> cs;
  for (int t = 0; t < 4; ++t) cs.push_back(ag::constant(random_matrix(2, 3, rng)));
  const Matrix h = pool_segment(cs)->value;
  for (std::size_t k = 0; k < 6; ++k) {
    double m = 0;
    for (const auto& c : cs) m += c->value.data[k];
    EXPECT_NEAR(h.data[k], m / 4, 1e-12);
  }
  EXPECT_EQ(pool_segment({cs[0]})->value.data, cs[0]->value.data);
  EXPECT_THROW(pool_segment({}), ShapeError);
}

TEST(Bilinear, BasisExtractionAndDoubleSum) {
  Matrix w(3, 2);
  w(0, 1) = 5;
  const std::vector<double> e1{1, 0, 0}, e2{0, 1};
  EXPECT_EQ(bilinear_score(e1, w, e2), 5.0);
  EXPECT_EQ(bilinear_score(e1, Matrix(3, 2), e2), 0.0);
  Rng rng(14);
  const Matrix rw = random_matrix(4, 3, rng), c = random_matrix(1, 4, rng), z = random_matrix(1, 3, rng);
  double s = 0;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 3; ++b) s += c.data[a] * rw(a, b) * z.data[b];
  EXPECT_NEAR(bilinear_score(c.data, rw, z.data), s, 1e-10);
  EXPECT_THROW(bilinear_score(z.data, rw, c.data), ShapeError);
}

TEST(Model, SameSeedSameParametersAndTrajectories) {
  auto run = [](std::uint64_t seed) {
    MBrainModel model(tiny(), seed);
    Adam opt;
    opt.add_group(model.trunk_params().vars(), {});
    Rng rng(15);
    const Matrix seg = random_matrix(60, 3, rng);
    for (int step = 0; step < 5; ++step) {
      opt.zero_grad();
      const auto cs = model.contextualize(model.encode({seg}), 3);
      ag::backward(ag::mean_all(ag::mul(model.pool(cs), model.pool(cs))));
      opt.step();
    }
    std::vector<double> flat;
    for (const auto& v : model.trunk_params().vars()) flat.insert(flat.end(), v->value.data.begin(), v->value.data.end());
    return flat;
  };
  const auto a = run(1), b = run(1), c = run(2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, MultiChannelEncoderShapes) {
  ModelConfig c = tiny();
  c.encoder = EncoderKind::multi_channel;
  const MBrainModel model(c, 16);
  const auto z = model.encode({Matrix(60, 3, 0.5), Matrix(60, 3, -0.5)});
  EXPECT_EQ(z->rows(), 2 * 3 * model.steps());
  EXPECT_EQ(z->cols(), 4u);
}

TEST(Optimizer, FirstAdamStepMovesByLearningRateTimesSign) {
  auto p = ag::parameter(Matrix(1, 3, {1.0, -2.0, 0.5}));
  Adam opt;
  opt.add_group({p}, {.learning_rate = 0.1, .weight_decay = 0.0});
  p->ensure_grad();
  p->grad = Matrix(1, 3, {3.0, -0.01, 0.0});
  opt.step();
  EXPECT_NEAR(p->value(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(p->value(0, 1), -1.9, 1e-4);
  EXPECT_EQ(p->value(0, 2), 0.5);
  EXPECT_THROW(opt.add_group({ag::constant(Matrix(1, 1))}, {}), std::invalid_argument);
}
