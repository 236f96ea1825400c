#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mbrain/autograd.hpp"
#include "mbrain/layers.hpp"
#include "test_util.hpp"

using namespace mbrain;
using mbrain::testing::random_matrix;

namespace {

using Fn = std::function<ag::Var(const std::vector<ag::Var>&)>;

// Projects the op output onto a fixed random matrix so every output entry
// reaches the scalar loss with a distinct weight.
double project(const Fn& f, const std::vector<ag::Var>& in, const Matrix& r) {
  const ag::Var out = f(in);
  double s = 0;
  for (std::size_t k = 0; k < out->value.size(); ++k) s += out->value.data[k] * r.data[k];
  return s;
}

void gradient_check(const Fn& f, std::vector<Matrix> inputs, double tol = 1e-6, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<ag::Var> vars;
  for (auto& m : inputs) vars.push_back(ag::parameter(m));
  const ag::Var out = f(vars);
  const Matrix r = random_matrix(out->rows(), out->cols(), rng);
  ag::backward(ag::sum_all(ag::mul(out, ag::constant(r))));
  const double h = 1e-6;
  for (std::size_t v = 0; v < vars.size(); ++v)
    for (std::size_t k = 0; k < inputs[v].size(); ++k) {
      std::vector<ag::Var> plus, minus;
      for (std::size_t u = 0; u < vars.size(); ++u) {
        Matrix p = inputs[u], m = inputs[u];
        if (u == v) {
          p.data[k] += h;
          m.data[k] -= h;
        }
        plus.push_back(ag::constant(p));
        minus.push_back(ag::constant(m));
      }
      const double numeric = (project(f, plus, r) - project(f, minus, r)) / (2 * h);
      const double analytic = vars[v]->grad.size() ? vars[v]->grad.data[k] : 0.0;
      EXPECT_NEAR(analytic, numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << v << " entry " << k;
    }
}

Matrix rnd(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return random_matrix(r, c, rng);
}

}  // namespace

TEST(Autograd, ElementwiseAndLinearOps) {
  gradient_check([](auto& x) { return ag::matmul(x[0], x[1]); }, {rnd(3, 4, 1), rnd(4, 2, 2)});
  gradient_check([](auto& x) { return ag::transpose(x[0]); }, {rnd(3, 4, 3)});
  gradient_check([](auto& x) { return ag::sub(ag::add(x[0], x[1]), ag::mul(x[0], x[1])); }, {rnd(2, 3, 4), rnd(2, 3, 5)});
  gradient_check([](auto& x) { return ag::add_n({x[0], x[1], x[0]}); }, {rnd(2, 2, 6), rnd(2, 2, 7)});
  gradient_check([](auto& x) { return ag::add_row(x[0], x[1]); }, {rnd(4, 3, 8), rnd(1, 3, 9)});
  gradient_check([](auto& x) { return ag::scale(ag::mean_all(x[0]), 3.0); }, {rnd(3, 3, 10)});
  gradient_check([](auto& x) { return ag::sigmoid(x[0]); }, {rnd(3, 3, 11)});
  gradient_check([](auto& x) { return ag::tanh(x[0]); }, {rnd(3, 3, 12)});
  gradient_check([](auto& x) { return ag::softplus(x[0]); }, {rnd(3, 3, 13)});
}

TEST(Autograd, ReluAwayFromKink) {
  Matrix m = rnd(4, 4, 14);
  for (double& v : m.data)
    if (std::abs(v) < 0.05) v = 0.5;
  gradient_check([](auto& x) { return ag::relu(x[0]); }, {m});
}

TEST(Autograd, ShapeOps) {
  gradient_check([](auto& x) { return ag::slice_cols(x[0], 1, 2); }, {rnd(3, 4, 15)});
  gradient_check([](auto& x) { return ag::concat_cols({x[0], x[1]}); }, {rnd(3, 2, 16), rnd(3, 3, 17)});
  gradient_check([](auto& x) { return ag::concat_rows({x[0], x[1]}); }, {rnd(2, 3, 18), rnd(1, 3, 19)});
  gradient_check([](auto& x) { return ag::gather_rows(x[0], {2, 0, 2, 1}); }, {rnd(3, 2, 20)});
  gradient_check([](auto& x) { return ag::reshape(x[0], 2, 6); }, {rnd(3, 4, 21)});
}

TEST(Autograd, ConvolutionWithPaddingAndStride) {
  const std::size_t n = 2, len = 7, in = 3, out = 2, k = 3, stride = 2;
  const std::size_t out_len = (len + stride - 1) / stride;
  gradient_check([=](auto& x) { return ag::conv1d(x[0], x[1], x[2], n, len, k, stride, 1, out_len); },
                 {rnd(n * len, in, 22), rnd(out, k * in, 23), rnd(1, out, 24)});
}

TEST(Autograd, ConvolutionMatchesDirectSum) {
  const Matrix x = rnd(5, 2, 25), w = rnd(3, 6, 26), b = rnd(1, 3, 27);
  const auto y = ag::conv1d(ag::constant(x), ag::constant(w), ag::constant(b), 1, 5, 3, 1, 1, 5);
  for (std::size_t o = 0; o < 5; ++o)
    for (std::size_t f = 0; f < 3; ++f) {
      double s = b(0, f);
      for (std::size_t kk = 0; kk < 3; ++kk) {
        const long t = static_cast<long>(o + kk) - 1;
        if (t < 0 || t >= 5) continue;
        for (std::size_t c = 0; c < 2; ++c) s += w(f, kk * 2 + c) * x(static_cast<std::size_t>(t), c);
      }
      EXPECT_NEAR(y->value(o, f), s, 1e-12);
    }
}

TEST(Autograd, LstmPointwise) {
  gradient_check([](auto& x) { return ag::lstm_pointwise(x[0], x[1]); }, {rnd(3, 8, 28), rnd(3, 2, 29)});
}

TEST(Autograd, Losses) {
  gradient_check([](auto& x) { return ag::cross_entropy(x[0], {0, 3, 1}, {1.0, 2.0, 0.5}); }, {rnd(3, 4, 30)});
  gradient_check([](auto& x) { return ag::bce_with_logits(x[0], {1, 0, 1, 0}, {8, 1, 8, 1}); }, {rnd(4, 1, 31)});
}

TEST(Autograd, CrossEntropyValueMatchesClosedForm) {
  const Matrix logits(1, 3, {0.0, std::log(2.0), std::log(5.0)});
  const auto l = ag::cross_entropy(ag::constant(logits), {2});
  EXPECT_NEAR(l->value(0, 0), -std::log(5.0 / 8.0), 1e-12);
  const Matrix uniform(2, 64, 0.0);
  EXPECT_NEAR(ag::cross_entropy(ag::constant(uniform), {0, 63})->value(0, 0), std::log(64.0), 1e-12);
}

TEST(Autograd, BceMatchesClosedFormAndZeroWeightsGiveZero) {
  const Matrix logits(2, 1, {0.3, -1.2});
  const auto l = ag::bce_with_logits(ag::constant(logits), {1, 0}, {3, 1});
  const double expect = (3 * std::log1p(std::exp(-0.3)) + std::log1p(std::exp(-1.2))) / 4;
  EXPECT_NEAR(l->value(0, 0), expect, 1e-12);
  EXPECT_EQ(ag::bce_with_logits(ag::constant(logits), {1, 0}, {0, 0})->value(0, 0), 0.0);
}

TEST(Autograd, GraphOps) {
  gradient_check([](auto& x) { return ag::gather_dot(x[0], x[1], {0, 2, 1, 1, 2, 0}, 3); }, {rnd(2, 4, 32), rnd(3, 4, 33)});
  Matrix adj = rnd(6, 3, 34);
  for (double& v : adj.data) v = std::abs(v) + 0.1;
  gradient_check([](auto& x) { return ag::normalize_offdiag_rows(x[0], 3); }, {adj});
  gradient_check([](auto& x) { return ag::block_matmul(x[0], x[1], 3); }, {rnd(6, 3, 35), rnd(6, 2, 36)});
  gradient_check([](auto& x) { return ag::block_attention(x[0], x[1], x[2], 3, 0.7); }, {rnd(6, 2, 37), rnd(6, 2, 38), rnd(6, 4, 39)});
}

TEST(Autograd, NormalizeOffdiagDropsSelfAndSumsToOne) {
  const Matrix a(2, 2, {5.0, 0.0, 0.7, 9.0});
  const auto n = ag::normalize_offdiag_rows(ag::constant(a), 2);
  EXPECT_EQ(n->value(0, 0), 0.0);
  EXPECT_EQ(n->value(0, 1), 0.0);  // zero off-diagonal mass
  EXPECT_EQ(n->value(1, 0), 1.0);
  EXPECT_EQ(n->value(1, 1), 0.0);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto x = ag::parameter(Matrix(1, 1, 3.0));
  auto y = ag::mul(x, x);
  ag::backward(ag::sum_all(ag::add(y, y)));
  EXPECT_DOUBLE_EQ(x->grad(0, 0), 12.0);
}

TEST(Autograd, ShapeErrorsAreReported) {
  EXPECT_THROW(ag::matmul(ag::constant(Matrix(2, 3)), ag::constant(Matrix(2, 3))), ShapeError);
  EXPECT_THROW(ag::add(ag::constant(Matrix(2, 3)), ag::constant(Matrix(3, 2))), ShapeError);
  EXPECT_THROW(ag::cross_entropy(ag::constant(Matrix(2, 3)), {0, 3}), ShapeError);
}

TEST(Layers, LstmSequenceGradient) {
  Rng rng(40);
  const Lstm lstm(3, 2, rng);
  ParamList params;
  lstm.collect(params, "lstm");
  const Matrix x = random_matrix(2 * 4, 3, rng);  // 2 sequences of 4 steps, rows n*steps + t
  auto run = [&](const Matrix& in) {
    const auto hs = lstm.run(ag::constant(in), 2, 4);
    return ag::concat_rows(hs);
  };
  gradient_check([&](auto& v) {
    const auto hs = lstm.run(v[0], 2, 4);
    return ag::concat_rows(hs);
  }, {x});
  EXPECT_EQ(run(x)->rows(), 8u);
}
