#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "langevin/integrators.hpp"
#include "langevin/model.hpp"

using namespace langevin;

namespace {

template <PotentialModel M>
void expect_gradient_matches_value(const M& model, double x) {
  typename M::vector_type p = M::vector_type::Constant(model.dim(), x);
  const double eps = 1e-6;
  for (int i = 0; i < model.dim(); ++i) {
    auto up = p, dn = p;
    up[i] += eps;
    dn[i] -= eps;
    EXPECT_NEAR(model.gradient(p)[i], (model.value(up) - model.value(dn)) / (2 * eps), 1e-7);
  }
}

}  // namespace

TEST(SineModel, DerivativesConsistent) {
  const auto m = sine_potential();
  for (double x : {-3.0, -0.7, 0.0, 0.2, 1.0, 4.5}) {
    expect_gradient_matches_value(m, x);
    const auto p = Vector<1>::Constant(x);
    const double eps = 1e-5;
    const double fd = (m.gradient(Vector<1>::Constant(x + eps))[0] - m.gradient(Vector<1>::Constant(x - eps))[0]) /
                      (2 * eps);
    EXPECT_NEAR(m.hessian(p)(0, 0), fd, 1e-8);
  }
  EXPECT_EQ(m.dim(), 1);
  EXPECT_TRUE(m.has_hessian());
}

TEST(QuadraticModel, ClosedForms) {
  const auto m = quadratic_potential<Dynamic>(2.5, 3);
  Eigen::VectorXd x(3);
  x << 1.0, -2.0, 0.5;
  EXPECT_DOUBLE_EQ(m.value(x), 0.5 * 2.5 * x.squaredNorm());
  EXPECT_EQ((m.gradient(x) - 2.5 * x).norm(), 0.0);
  EXPECT_EQ((m.hessian(x) - 2.5 * Eigen::MatrixXd::Identity(3, 3)).norm(), 0.0);
  expect_gradient_matches_value(m, 0.3);
  EXPECT_THROW(quadratic_potential<1>(0.0), std::invalid_argument);
  EXPECT_THROW((QuadraticModel<1>(1.0, 2)), std::invalid_argument);
}

TEST(FunctionModel, MissingHessianThrows) {
  FunctionModel<1> m(
      1, [](const Vector<1>& x) { return x.squaredNorm(); }, [](const Vector<1>& x) { return Vector<1>(2 * x); },
      ModelConstants{});
  EXPECT_FALSE(m.has_hessian());
  EXPECT_THROW(m.hessian(Vector<1>::Zero()), std::logic_error);
}

TEST(Assumptions, SineModelPassesOnGrid) {
  std::vector<Vector<1>> grid;
  for (double x = -50; x <= 50; x += 0.01) grid.push_back(Vector<1>::Constant(x));
  const auto r = check_assumptions(sine_potential(), grid);
  EXPECT_EQ(r.growth, CheckStatus::pass);
  EXPECT_EQ(r.drift, CheckStatus::pass);
  EXPECT_EQ(r.convexity, CheckStatus::pass);
  EXPECT_TRUE(r.passed());
}

TEST(Assumptions, FailingConstantsAreReported) {
  std::vector<Vector<1>> grid;
  for (double x = -5; x <= 5; x += 0.5) grid.push_back(Vector<1>::Constant(x));
  const auto r = check_assumptions(sine_potential(), grid, ModelConstants{2.0, 0.0, 0.5, 1.0, 0.0});
  EXPECT_EQ(r.growth, CheckStatus::fail);
  EXPECT_EQ(r.drift, CheckStatus::fail);
  EXPECT_EQ(r.convexity, CheckStatus::fail);
  EXPECT_FALSE(r.passed());
  EXPECT_THROW(check_assumptions(sine_potential(), {}), std::invalid_argument);
}

TEST(Assumptions, NoHessianSkipsConvexity) {
  FunctionModel<1> m(
      1, [](const Vector<1>& x) { return 0.5 * x.squaredNorm(); }, [](const Vector<1>& x) { return Vector<1>(x); },
      ModelConstants{1.0, 0.0, 1.0, 1.0, 0.0});
  const auto r = check_assumptions(m, {Vector<1>::Constant(1.0)});
  EXPECT_EQ(r.convexity, CheckStatus::skipped);
  EXPECT_TRUE(r.passed());
}

TEST(TestFunctions, ValuesAndIds) {
  const auto z = make_state<1>(2.0, -3.0);
  EXPECT_EQ(first_position<1>()(z), 2.0);
  EXPECT_EQ(first_velocity<1>()(z), -3.0);
  EXPECT_EQ(position_squared<1>()(z), 4.0);
  EXPECT_EQ(velocity_squared<1>()(z), 9.0);
  EXPECT_EQ(constant_function<1>(1.5)(z), 1.5);
  EXPECT_EQ(position_squared<1>().id, "x2");
  EXPECT_TRUE(position_squared<1>().position_only);
  EXPECT_FALSE(velocity_squared<1>().position_only);
  const auto [gx, gv] = position_squared<1>().grad_f(z.x, z.v);
  EXPECT_EQ(gx[0], 4.0);
  EXPECT_EQ(gv[0], 0.0);
}

TEST(StochasticGradient, SineNoiseIsUnbiased) {
  const auto sg = sine_stochastic_gradient();
  RngStream s(1, 0);
  const int n = 100000;
  const Vector<1> x = Vector<1>::Constant(0.7);
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double d = sg.b(x, sg.sample_omega(s))[0] - sg.base().gradient(x)[0];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_LE(std::abs(mean), 3.0 * se);
  // Var(w1) x^2 + Var(w2) = (1.6^2 / 12) 0.49 + 0.16
  EXPECT_NEAR(sum2 / n, 1.6 * 1.6 / 12 * 0.49 + 0.16, 0.01);
}

TEST(StochasticGradient, QuadraticNoiseIsUnbiased) {
  const QuadraticStochasticGradient<1> sg(quadratic_potential<1>(2.0));
  RngStream s(2, 0);
  const int n = 100000;
  const Vector<1> x = Vector<1>::Constant(-1.3);
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double d = sg.b(x, sg.sample_omega(s))[0] - sg.base().gradient(x)[0];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n;
  EXPECT_LE(std::abs(mean), 3.0 * std::sqrt((sum2 / n - mean * mean) / n));
}

TEST(Minibatch, ExactMeanOverAllSubsets) {
  const MinibatchQuadraticModel<1> sg(5, 2, 1);
  double total = 0;
  int count = 0;
  for (int i = 0; i < 5; ++i) {
    for (int j = i + 1; j < 5; ++j) {
      total += sg.b(Vector<1>::Constant(1.0), {i, j})[0];
      ++count;
    }
  }
  EXPECT_NEAR(total / count, 1.0, 1e-14);
  double ksum = 0;
  for (int j = 0; j < 5; ++j) ksum += sg.part_stiffness(j);
  EXPECT_NEAR(ksum / 5, 1.0, 1e-14);
  EXPECT_THROW((MinibatchQuadraticModel<1>(3, 4, 1)), std::invalid_argument);
}

TEST(Minibatch, SubsetsAreDistinctAndUniform) {
  RngStream s(3, 0);
  std::map<std::set<int>, int> counts;
  const int n = 60000;
  for (int i = 0; i < n; ++i) {
    const auto idx = sample_subset(4, 2, s);
    const std::set<int> set(idx.begin(), idx.end());
    ASSERT_EQ(set.size(), 2u);
    ++counts[set];
  }
  EXPECT_EQ(counts.size(), 6u);
  for (const auto& [k, c] : counts) EXPECT_NEAR(c, n / 6.0, 5.0 * std::sqrt(n / 6.0));
  EXPECT_THROW(sample_subset(3, 0, s), std::invalid_argument);
}

TEST(Minibatch, GradientHelperAveragesParts) {
  std::vector<std::function<Vector<1>(const Vector<1>&)>> parts;
  for (int j = 0; j < 4; ++j) {
    parts.push_back([j](const Vector<1>& x) { return Vector<1>((j + 1.0) * x); });
  }
  RngStream s(4, 0);
  const auto g = minibatch_gradient<1>(parts, 4, s, Vector<1>::Constant(2.0));
  EXPECT_DOUBLE_EQ(g[0], 2.0 * 2.5);
}

TEST(StochasticGradient, OneStepMeanMatchesFullGradientTwin) {
  // SG-EM against EM with shared Brownian noise: the one-step gap is
  // -h (b - grad U), whose mean must vanish.
  const auto sg = sine_stochastic_gradient();
  const StepParams p{2.0, 0.25, 0.5};
  const auto z0 = make_state<1>(0.2, -0.3);
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    auto streams = TrajectoryStreams::for_trajectory(5, static_cast<std::uint64_t>(i));
    RngStream noise_copy = streams.noise;
    const auto a = sgem_step(z0, sg, p, streams.noise, streams.omega);
    const auto b = em_step(z0, sg.base(), p, noise_copy);
    EXPECT_EQ(a.x[0], b.x[0]);
    const double d = a.v[0] - b.v[0];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n;
  EXPECT_LE(std::abs(mean), 3.0 * std::sqrt((sum2 / n - mean * mean) / n));
}
