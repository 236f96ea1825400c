#include <gtest/gtest.h>

#include <cmath>

#include "mbrain/theory.hpp"

using namespace mbrain;

namespace {

// Plug-in MI of a 2-D histogram over [-5, 5]^2.
double histogram_mi(double rho, std::size_t samples, std::size_t bins, Rng& rng) {
  std::vector<double> joint(bins * bins, 0.0), px(bins, 0.0), py(bins, 0.0);
  auto bin = [&](double v) {
    const double u = (v + 5.0) / 10.0 * static_cast<double>(bins);
    return static_cast<std::size_t>(std::clamp(u, 0.0, static_cast<double>(bins) - 1.0));
  };
  for (std::size_t k = 0; k < samples; ++k) {
    const double x = rng.normal();
    const double y = rho * x + std::sqrt(1 - rho * rho) * rng.normal();
    const std::size_t a = bin(x), b = bin(y);
    joint[a * bins + b] += 1;
    px[a] += 1;
    py[b] += 1;
  }
  const double n = static_cast<double>(samples);
  double mi = 0;
  for (std::size_t a = 0; a < bins; ++a)
    for (std::size_t b = 0; b < bins; ++b) {
      const double j = joint[a * bins + b];
      if (j > 0) mi += j / n * std::log(j * n / (px[a] * py[b]));
    }
  return mi;
}

}  // namespace

TEST(AnalyticMi, ClosedFormValues) {
  EXPECT_EQ(analytic_gaussian_mi(0.0), 0.0);
  EXPECT_NEAR(analytic_gaussian_mi(0.9), -0.5 * std::log(0.19), 1e-15);
  EXPECT_NEAR(analytic_gaussian_mi(0.9), 0.8304, 1e-4);
  EXPECT_EQ(analytic_gaussian_mi(0.37), analytic_gaussian_mi(-0.37));
  EXPECT_THROW(analytic_gaussian_mi(1.0), std::invalid_argument);
  EXPECT_THROW(analytic_gaussian_mi(-1.2), std::invalid_argument);
}

TEST(AnalyticMi, AgreesWithHistogramEstimate) {
  Rng rng(1);
  EXPECT_NEAR(histogram_mi(0.9, 1'000'000, 80, rng), analytic_gaussian_mi(0.9), 0.03);
}

TEST(GaussianSpec, RejectsIndefiniteCovariance) {
  EXPECT_THROW(validate(uniform_spec(2, 0.9, 0.5)), std::invalid_argument);
  EXPECT_NO_THROW(validate(uniform_spec(2, 0.9, 0.3)));
  EXPECT_THROW(validate(uniform_spec(1, 0.5, 0.2)), std::invalid_argument);
}

TEST(GaussianSpec, SampleMomentsMatchTheModel) {
  const auto spec = uniform_spec(3, 0.6, 0.4);
  Rng rng(2);
  const auto b = sample_gaussian(spec, 200'000, rng);
  double xx = 0, xc = 0, xs = 0;
  for (std::size_t r = 0; r < b.x.rows; ++r) {
    xx += b.x(r, 1) * b.x(r, 1);
    xc += b.x(r, 1) * b.c(r, 1);
    xs += b.x(r, 1) * b.s(r, 1);
  }
  const double n = static_cast<double>(b.x.rows);
  EXPECT_NEAR(xx / n, 1.0, 0.01);
  EXPECT_NEAR(xc / n, 0.6, 0.01);
  EXPECT_NEAR(xs / n, 0.4, 0.01);
}

TEST(SingleChannel, IndependentDataGivesNoInformation) {
  Rng rng(3);
  const auto r = single_channel_cpc_bound(uniform_spec(1, 0.0, 0.0), 64, 400, rng);
  EXPECT_NEAR(r.mi_estimate, 0.0, 0.05);
  EXPECT_NEAR(r.estimated_loss, std::log(64.0), 0.05);
  EXPECT_TRUE(r.satisfied);
  EXPECT_FALSE(r.diverged);
}

TEST(SingleChannel, StrongCorrelationIsSandwiched) {
  Rng rng(4);
  const auto r = single_channel_cpc_bound(uniform_spec(1, 0.9, 0.0), 64, 400, rng);
  EXPECT_GT(r.mi_estimate, 0.4);
  EXPECT_LE(r.mi_estimate, 0.8304 + 0.05);
  EXPECT_NEAR(r.bound_rhs, -0.8304 + std::log(64.0), 1e-4);
  EXPECT_NEAR(r.bound_rhs, 3.328, 1e-3);
  EXPECT_TRUE(r.satisfied);
}

TEST(SingleChannel, EstimatorStaysUnderItsCeiling) {
  for (double rho : {0.0, 0.5, 0.9}) {
    Rng rng(5);
    const auto spec = uniform_spec(2, rho, 0.0);
    const auto r = single_channel_cpc_bound(spec, 32, 300, rng);
    double true_total = 0;
    for (double m : r.per_channel_true_mi) true_total += m;
    EXPECT_LE(r.mi_estimate, std::min(2 * std::log(32.0), true_total + 3 * r.monte_carlo_stderr)) << "rho " << rho;
  }
}

TEST(SingleChannel, ReportsRepeatUnderSeed) {
  Rng a(6), b(6);
  const auto ra = single_channel_cpc_bound(uniform_spec(2, 0.5, 0.0), 16, 50, a);
  const auto rb = single_channel_cpc_bound(uniform_spec(2, 0.5, 0.0), 16, 50, b);
  EXPECT_EQ(to_json(ra).dump(), to_json(rb).dump());
}

TEST(MultiChannel, BoundHoldsWithNeighbors) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const auto r = cpc_bound(uniform_spec(4, 0.5, 0.3), Aggregation::with_neighbors, 64, 400, rng);
    EXPECT_TRUE(r.satisfied) << "seed " << seed << " loss " << r.estimated_loss << " rhs " << r.bound_rhs;
    EXPECT_EQ(r.satisfied, r.estimated_loss >= r.bound_rhs - 3 * r.monte_carlo_stderr);
  }
}

TEST(MultiChannel, NeighborsHelpOnlyWhenCorrelated) {
  Rng strong_rng(7), none_rng(8);
  const auto strong = multi_channel_cpc_bound(uniform_spec(2, 0.5, 0.8), 64, 400, strong_rng);
  EXPECT_GT(strong.mi_gain - 3 * strong.mi_gain_stderr, 0.05);
  EXPECT_TRUE(strong.not_worse);
  const auto none = multi_channel_cpc_bound(uniform_spec(2, 0.5, 0.0), 64, 400, none_rng);
  EXPECT_LE(std::abs(none.mi_gain), 3 * none.mi_gain_stderr);
}

TEST(Jensen, EqualArgumentsGiveZeroGap) {
  const auto g = jensen_gap({0.3, 0.3, 0.3, 0.3});
  EXPECT_EQ(g.gap, 0.0);
}

TEST(Jensen, TwoValueArithmetic) {
  const auto g = jensen_gap({0.1, 0.9});
  EXPECT_NEAR(g.lhs, 0.09, 1e-15);
  EXPECT_NEAR(g.rhs, 0.25, 1e-15);
  EXPECT_NEAR(g.gap, 0.16, 1e-15);
}

TEST(Jensen, RandomTuplesAreNonNegativeAndScaleCovariant) {
  Rng rng(9);
  for (int rep = 0; rep < 100000; ++rep) {
    std::vector<double> p(2 + rng.index(5));
    for (double& v : p) v = rng.uniform(1e-3, 2.0);
    const auto g = jensen_gap(p);
    EXPECT_GE(g.gap, -1e-15 * g.rhs);
    if (rep % 1000 == 0) {
      std::vector<double> q = p;
      for (double& v : q) v *= 2.5;
      const auto h = jensen_gap(q);
      const double cn = std::pow(2.5, static_cast<double>(p.size()));
      EXPECT_NEAR(h.lhs, cn * g.lhs, 1e-12 * cn * g.rhs);
      EXPECT_NEAR(h.gap, cn * g.gap, 1e-12 * cn * g.rhs);
    }
  }
}

TEST(Jensen, NonPositiveInputRejected) {
  EXPECT_THROW(jensen_gap({0.5, 0.0}), std::invalid_argument);
  EXPECT_THROW(jensen_gap({}), std::invalid_argument);
}
