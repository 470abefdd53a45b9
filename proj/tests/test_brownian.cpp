#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "langevin/brownian.hpp"

using namespace langevin;

namespace {

// Direct formulas, fine away from t = 0.
double sxx_direct(double g, double t) {
  return 2.0 / (g * g) * (g * t - 2.0 * (1.0 - std::exp(-g * t)) + 0.5 * (1.0 - std::exp(-2.0 * g * t)));
}

}  // namespace

TEST(OuCovariance, ZeroStepIsZero) {
  const auto c = ou_covariance(2.0, 0.0);
  EXPECT_EQ(c.sigma_xx, 0.0);
  EXPECT_EQ(c.sigma_xv, 0.0);
  EXPECT_EQ(c.sigma_vv, 0.0);
  EXPECT_TRUE(c.is_psd());
}

TEST(OuCovariance, MatchesDirectFormula) {
  for (double t : {0.05, 0.25, 0.5, 1.0, 3.0}) {
    const auto c = ou_covariance(2.0, t);
    EXPECT_NEAR(c.sigma_vv, 1.0 - std::exp(-4.0 * t), 1e-14);
    EXPECT_NEAR(c.sigma_xv, std::pow(1.0 - std::exp(-2.0 * t), 2) / 2.0, 1e-14);
    EXPECT_NEAR(c.sigma_xx, sxx_direct(2.0, t), 1e-13);
  }
}

TEST(OuCovariance, SmallStepSeriesIsAccurate) {
  // Leading behaviour: sigma_xx ~ 2 gamma t^3 / 3, sigma_xv ~ gamma t^2, sigma_vv ~ 2 gamma t.
  const double g = 2.0, t = 1e-6;
  const auto c = ou_covariance(g, t);
  EXPECT_NEAR(c.sigma_xx / (2.0 * g * t * t * t / 3.0), 1.0, 1e-5);
  EXPECT_NEAR(c.sigma_xv / (g * t * t), 1.0, 1e-5);
  EXPECT_NEAR(c.sigma_vv / (2.0 * g * t), 1.0, 1e-5);
  EXPECT_GT(c.determinant(), 0.0);
  // Continuity across the series switch at a = 0.1.
  const auto below = ou_covariance(1.0, 0.1 - 1e-14);
  const auto above = ou_covariance(1.0, 0.1 + 1e-14);
  EXPECT_NEAR(below.sigma_xx, above.sigma_xx, 1e-15);
}

TEST(OuCovariance, PositiveDefiniteOverRange) {
  for (double g : {0.1, 1.0, 2.0, 10.0, 50.0}) {
    for (double t = 1e-4; t < 10.0; t *= 1.7) {
      const auto c = ou_covariance(g, t);
      EXPECT_TRUE(c.is_psd()) << g << " " << t;
      EXPECT_GT(c.determinant(), 0.0) << g << " " << t;
    }
  }
}

TEST(OuCovariance, RejectsBadArguments) {
  EXPECT_THROW(ou_covariance(0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(ou_covariance(1.0, -1.0), std::invalid_argument);
}

TEST(OuFactor, ReproducesCovariance) {
  const auto c = ou_covariance(2.0, 0.3);
  const OuFactor l(c);
  EXPECT_NEAR(l.l11 * l.l11, c.sigma_xx, 1e-15);
  EXPECT_NEAR(l.l21 * l.l11, c.sigma_xv, 1e-15);
  EXPECT_NEAR(l.l21 * l.l21 + l.l22 * l.l22, c.sigma_vv, 1e-15);
}

TEST(OuFactor, RejectsIndefinite) {
  OuCovariance bad;
  bad.sigma_xx = 1.0;
  bad.sigma_vv = 1.0;
  bad.sigma_xv = 2.0;
  EXPECT_THROW(OuFactor{bad}, std::domain_error);
}

TEST(OuIncrement, EmpiricalCovariance) {
  const auto c = ou_covariance(2.0, 0.25);
  RngStream s(4, 0);
  const int n = 400000;
  double xx = 0, xv = 0, vv = 0;
  for (int i = 0; i < n; ++i) {
    const auto [x, v] = sample_ou_increment<1>(c, 1, s);
    xx += x[0] * x[0];
    xv += x[0] * v[0];
    vv += v[0] * v[0];
  }
  EXPECT_NEAR(xx / n, c.sigma_xx, 5.0 * c.sigma_xx * std::sqrt(2.0 / n));
  EXPECT_NEAR(vv / n, c.sigma_vv, 5.0 * c.sigma_vv * std::sqrt(2.0 / n));
  EXPECT_NEAR(xv / n, c.sigma_xv, 5.0 * std::sqrt((c.sigma_xx * c.sigma_vv + c.sigma_xv * c.sigma_xv) / n));
}

TEST(BrownianPath, IncrementVariance) {
  RngStream s(6, 0);
  const auto p = BrownianPath<1>::sample(2.0, 14, 1, s);
  EXPECT_EQ(p.size(), 1u << 14);
  EXPECT_DOUBLE_EQ(p.cell_width(), 2.0 / (1 << 14));
  double ss = 0;
  for (std::size_t k = 0; k < p.size(); ++k) ss += p[k][0] * p[k][0];
  EXPECT_NEAR(ss, 2.0, 5.0 * 2.0 * std::sqrt(2.0 / p.size()));
  EXPECT_NEAR(p.value_at_cell(p.size())[0], p.value_at_cell(p.size() - 1)[0] + p[p.size() - 1][0], 1e-12);
}

TEST(BrownianPath, RefinementPreservesCoarseSums) {
  RngStream s(7, 0);
  const auto coarse = BrownianPath<Dynamic>::sample(1.0, 3, 2, s);
  const auto fine = refine(coarse, 6, s);
  ASSERT_EQ(fine.size(), 64u);
  for (std::size_t k = 0; k < coarse.size(); ++k) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(2);
    for (std::size_t j = 0; j < 8; ++j) sum += fine[8 * k + j];
    EXPECT_NEAR((sum - coarse[k]).norm(), 0.0, 1e-12);
  }
}

TEST(BrownianPath, RefinedIncrementsHaveFineVariance) {
  RngStream s(8, 0);
  const auto coarse = BrownianPath<1>::sample(1.0, 2, 1, s);
  double ss = 0;
  std::size_t n = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto fine = refine(BrownianPath<1>::sample(1.0, 2, 1, s), 10, s);
    for (std::size_t k = 0; k < fine.size(); ++k) ss += fine[k][0] * fine[k][0];
    n += fine.size();
  }
  const double w = 1.0 / 1024;
  EXPECT_NEAR(ss / n, w, 5.0 * w * std::sqrt(2.0 / n));
  EXPECT_THROW(refine(coarse, 1, s), std::invalid_argument);
}

TEST(WeightedIntegral, UnitWeightIsIncrement) {
  RngStream s(9, 0);
  const auto p = BrownianPath<1>::sample(1.0, 8, 1, s);
  const auto w = weighted_integral<1>(p, [](double) { return 1.0; }, 0.25, 0.5);
  double direct = 0;
  for (std::size_t k = 64; k < 192; ++k) direct += p[k][0];
  EXPECT_NEAR(w[0], direct, 1e-12);
}

TEST(WeightedIntegral, Errors) {
  RngStream s(9, 1);
  const auto p = BrownianPath<1>::sample(1.0, 8, 1, s);
  auto one = [](double) { return 1.0; };
  EXPECT_THROW(weighted_integral<1>(p, one, 0.5, 0.75), std::out_of_range);
  EXPECT_THROW(weighted_integral<1>(p, one, 0.001, 0.5), std::invalid_argument);
  EXPECT_THROW(weighted_integral<1>(p, one, 0.0, 16.0 / 256), std::invalid_argument);
}
