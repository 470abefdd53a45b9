#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "langevin/estimator.hpp"
#include "langevin/output.hpp"
#include "langevin/parallel.hpp"
#include "langevin/registry.hpp"

using namespace langevin;

namespace {

// Composite Simpson ratio of int g(x) e^{-U} / int e^{-U} for U = x^2/2 + sin x.
double sine_oracle(double (*g)(double)) {
  const double L = 40.0;
  const int n = 400000;
  const double dx = 2 * L / n;
  double num = 0, den = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = -L + i * dx;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double p = std::exp(-(0.5 * x * x + std::sin(x)));
    num += w * g(x) * p;
    den += w * p;
  }
  return num / den;
}

SweepConfig small_sweep() {
  SweepConfig cfg;
  cfg.h_grid = {0.25, 0.125};
  cfg.total_time = 50;
  cfg.trajectories = 8;
  cfg.integrator = IntegratorKind::ubu;
  cfg.model_id = "sine";
  cfg.f_id = "x";
  return cfg;
}

}  // namespace

TEST(GaussHermite, IntegratesGaussianMoments) {
  const auto rule = gauss_hermite(20);
  double m0 = 0, m2 = 0, m4 = 0, m6 = 0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double x = rule.nodes[i], w = rule.weights[i];
    m0 += w;
    m2 += w * x * x;
    m4 += w * std::pow(x, 4);
    m6 += w * std::pow(x, 6);
  }
  EXPECT_NEAR(m0, 1.0, 1e-13);
  EXPECT_NEAR(m2, 1.0, 1e-12);
  EXPECT_NEAR(m4, 3.0, 1e-11);
  EXPECT_NEAR(m6, 15.0, 1e-10);
}

TEST(ReferenceMean, SineMatchesIndependentQuadrature) {
  const auto model = sine_potential();
  const auto rx = reference_mean(model, first_position<1>());
  EXPECT_NEAR(rx.value, sine_oracle([](double x) { return x; }), 1e-10);
  EXPECT_LT(rx.abs_error_bound, 1e-8);
  const auto rx2 = reference_mean(model, position_squared<1>());
  EXPECT_NEAR(rx2.value, sine_oracle([](double x) { return x * x; }), 1e-10);
  EXPECT_NEAR(reference_mean(model, velocity_squared<1>()).value, 1.0, 1e-12);
}

TEST(ReferenceMean, QuadraticAgreesWithClosedForm) {
  const auto q1 = quadratic_potential<1>(2.0);
  EXPECT_NEAR(reference_mean(q1, position_squared<1>()).value, 0.5, 1e-10);
  const auto q2 = quadratic_potential<Dynamic>(4.0, 2);
  EXPECT_NEAR(reference_mean(q2, position_squared<Dynamic>()).value, 0.5, 1e-9);
  EXPECT_NEAR(reference_mean(q2, first_position<Dynamic>()).value, 0.0, 1e-10);
  EXPECT_EQ(stationary_mean(q2, position_squared<Dynamic>()).value, 0.5);
  EXPECT_EQ(stationary_mean(q2, position_squared<Dynamic>()).method, "exact");
}

TEST(ReferenceMean, ConstantAndDimensionLimit) {
  auto f = make_test_function<1>("const:2.5");
  EXPECT_EQ(stationary_mean(sine_potential(), f).value, 2.5);
  EXPECT_NEAR(reference_mean(sine_potential(), f).value, 2.5, 1e-12);
  const auto q3 = quadratic_potential<Dynamic>(1.0, 3);
  EXPECT_THROW(reference_mean(q3, first_position<Dynamic>()), std::invalid_argument);
}

TEST(SummarizeErrors, MatchesDirectFormulas) {
  const std::vector<double> e{1.0, -2.0, 0.5, 3.0};
  const auto c = summarize_errors(e);
  EXPECT_DOUBLE_EQ(c.bias, 0.625);
  EXPECT_DOUBLE_EQ(c.mse, (1 + 4 + 0.25 + 9) / 4.0);
  double v = 0;
  for (double x : e) v += (x - 0.625) * (x - 0.625);
  EXPECT_DOUBLE_EQ(c.variance, v / 3);
  EXPECT_NEAR(c.mse - c.variance * 3 / 4, c.bias_squared(), 1e-14);
  EXPECT_EQ(c.trajectories, 4);
  EXPECT_EQ(summarize_errors(std::vector<double>{}).trajectories, 0);
}

TEST(Sweep, ShapeAndStepCounts) {
  const auto r = run_sweep(small_sweep());
  ASSERT_EQ(r.cells.size(), 2u);
  EXPECT_EQ(r.cells[0].n_steps, 200);
  EXPECT_EQ(r.cells[1].n_steps, 400);
  EXPECT_EQ(r.cells[0].trajectories, 8);
  EXPECT_EQ(r.floor_estimate, r.cells[1].mse);
  EXPECT_EQ(steps_for(1.0, 0.3), 3);
}

TEST(Sweep, DeterministicAndWorkerInvariant) {
  auto cfg = small_sweep();
  const auto a = run_sweep(cfg);
  const auto b = run_sweep(cfg);
  cfg.workers = 3;
  const auto c = run_sweep(cfg);
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(format_double(a.cells[i].mse), format_double(b.cells[i].mse));
    EXPECT_EQ(format_double(a.cells[i].mse), format_double(c.cells[i].mse));
    EXPECT_EQ(a.cells[i].bias, c.cells[i].bias);
  }
  cfg.master_seed = 2;
  EXPECT_NE(run_sweep(cfg).cells[0].mse, a.cells[0].mse);
}

TEST(Sweep, RejectsBadConfig) {
  auto cfg = small_sweep();
  cfg.trajectories = 1;
  EXPECT_THROW(run_sweep(cfg), std::invalid_argument);
  cfg = small_sweep();
  cfg.h_grid = {1.0};
  EXPECT_THROW(run_sweep(cfg), std::invalid_argument);
  cfg.h_max = 2.0;
  EXPECT_NO_THROW(run_sweep(cfg));
  cfg.h_grid = {};
  EXPECT_THROW(run_sweep(cfg), std::invalid_argument);
}

TEST(Sweep, AllDivergedIsReported) {
  auto cfg = small_sweep();
  cfg.model_id = "quadratic:100";
  cfg.integrator = IntegratorKind::em;
  cfg.h_grid = {0.5};
  cfg.total_time = 1000;
  try {
    run_sweep(cfg);
    FAIL() << "expected AllDivergedError";
  } catch (const AllDivergedError& e) {
    EXPECT_EQ(e.h(), 0.5);
  }
}

TEST(FitSlope, RecoversPowerLaw) {
  ErrorReport r;
  for (double h : {0.5, 0.25, 0.125, 0.0625}) {
    ErrorCell c;
    c.h = h;
    c.trajectories = 10;
    c.variance = 0.01;
    c.mse = 3.0 * h * h + 0.009;
    r.cells.push_back(c);
  }
  r.floor_estimate = r.cells.back().mse;
  const auto fit = fit_slope(r, 0.0625, 0.5, FloorMode::variance);
  EXPECT_NEAR(fit.slope, 2.0, 1e-12);
  EXPECT_NEAR(std::exp(fit.intercept), 3.0, 1e-10);
  EXPECT_EQ(fit.cells_used, 4);
  const auto raw = fit_slope(r, 0.0625, 0.5);
  EXPECT_LT(raw.slope, 2.0);
  EXPECT_THROW(fit_slope(r, 0.25, 0.5), std::runtime_error);
}

TEST(Parallel, EveryIndexVisitedOnce) {
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  EXPECT_EQ(std::accumulate(hits.begin(), hits.end(), 0), 1000);
  EXPECT_EQ(*std::min_element(hits.begin(), hits.end()), 1);
  EXPECT_THROW(parallel_for(10, 2, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Registry, ParsesModelIds) {
  const auto q = parse_model("quadratic:2.5,2");
  EXPECT_EQ(q.family, ModelSpec::Family::quadratic);
  EXPECT_EQ(q.k, 2.5);
  EXPECT_EQ(q.dim, 2);
  const auto m = parse_model("minibatch-quadratic:10,3");
  EXPECT_EQ(m.parts, 10);
  EXPECT_EQ(m.batch, 3);
  EXPECT_EQ(parse_model("sine").family, ModelSpec::Family::sine);
  EXPECT_THROW(parse_model("banana"), std::invalid_argument);
  EXPECT_THROW(parse_model("quadratic:-1"), std::invalid_argument);
  EXPECT_THROW(make_test_function<1>("x3"), std::invalid_argument);
}

TEST(Output, CsvAndFormatting) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  CsvWriter w({"a", "b"});
  w.row({"1", "2"});
  EXPECT_EQ(w.str(), "a,b\n1,2\n");
  const auto svg = loglog_svg({PlotSeries{"em", {0.5, 0.25}, {1.0, 0.25}}}, "t", "h", "mse");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
}
