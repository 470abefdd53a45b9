#pragma once

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "langevin/integrators.hpp"
#include "langevin/model.hpp"
#include "langevin/parallel.hpp"

namespace langevin {

// ---------------------------------------------------------------------------
// Reference mean pi(f) by quadrature
// ---------------------------------------------------------------------------

struct ReferenceMean {
  double value = 0.0;
  double abs_error_bound = 0.0;
  std::string method;
};

struct QuadratureOptions {
  int hermite_nodes = 40;
  double tolerance = 1e-13;
  int panels = 16;
};

/// Gauss-Hermite rule for the standard normal weight (nodes and weights
/// summing to 1), from the Golub-Welsch eigenproblem.
struct HermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline HermiteRule gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: n must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  HermiteRule rule;
  for (int i = 0; i < n; ++i) {
    rule.nodes.push_back(eig.eigenvalues()[i]);
    const double c = eig.eigenvectors()(0, i);
    rule.weights.push_back(c * c);
  }
  return rule;
}

namespace detail {

struct Integral {
  double value = 0.0;
  double error = 0.0;
};

template <class Fn>
Integral integrate_1d(Fn&& fn, double lo, double hi, const QuadratureOptions& opt) {
  Integral out;
  const double width = (hi - lo) / opt.panels;
  for (int p = 0; p < opt.panels; ++p) {
    double err = 0.0;
    out.value += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        fn, lo + p * width, lo + (p + 1) * width, 15, opt.tolerance, &err);
    out.error += err;
  }
  return out;
}

// Velocity expectation E_v f(x, v), v ~ N(0, I), by tensor Gauss-Hermite.
template <int Dim>
double velocity_average(const TestFunction<Dim>& f, const Vector<Dim>& x, const HermiteRule& rule) {
  const int d = static_cast<int>(x.size());
  Vector<Dim> v = Vector<Dim>::Zero(d);
  if (f.position_only) return f(x, v);
  const int n = static_cast<int>(rule.nodes.size());
  double acc = 0.0;
  if (d == 1) {
    for (int i = 0; i < n; ++i) {
      v[0] = rule.nodes[i];
      acc += rule.weights[i] * f(x, v);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        v[0] = rule.nodes[i];
        v[1] = rule.nodes[j];
        acc += rule.weights[i] * rule.weights[j] * f(x, v);
      }
    }
  }
  return acc;
}

}  // namespace detail

/// Half-width L of the box [-L, L]^d outside of which exp(-(U - U_min))
/// is below e^-60, found by scanning outwards.
template <PotentialModel Model>
std::pair<double, double> quadrature_box(const Model& model) {
  using V = typename Model::vector_type;
  const int d = model.dim();
  double u_min = std::numeric_limits<double>::infinity();
  V x = V::Zero(d);
  constexpr int kScan = 400;
  auto place = [&x](double a, double b) {
    if constexpr (Model::dim_tag == 1) {
      throw std::logic_error("quadrature_box: planar point for a d = 1 model");
    } else {
      x[0] = a;
      x[1] = b;
    }
  };
  if (d == 1) {
    for (int i = 0; i <= kScan; ++i) {
      x[0] = -20.0 + 40.0 * i / kScan;
      u_min = std::min(u_min, model.value(x));
    }
  } else {
    for (int i = 0; i <= kScan / 4; ++i) {
      for (int j = 0; j <= kScan / 4; ++j) {
        place(-20.0 + 160.0 * i / kScan, -20.0 + 160.0 * j / kScan);
        u_min = std::min(u_min, model.value(x));
      }
    }
  }
  auto boundary_min = [&](double L) {
    double lowest = std::numeric_limits<double>::infinity();
    if (d == 1) {
      for (double s : {-L, L}) {
        x[0] = s;
        lowest = std::min(lowest, model.value(x));
      }
      return lowest;
    }
    constexpr int kEdge = 200;
    for (int i = 0; i <= kEdge; ++i) {
      const double t = -L + 2.0 * L * i / kEdge;
      for (auto [a, b] : {std::pair{t, -L}, std::pair{t, L}, std::pair{-L, t}, std::pair{L, t}}) {
        place(a, b);
        lowest = std::min(lowest, model.value(x));
      }
    }
    return lowest;
  };
  double L = 2.0;
  while (boundary_min(L) - u_min < 60.0) {
    L += 1.0;
    if (L > 1e3) throw std::runtime_error("reference_mean: potential does not confine");
  }
  return {L, u_min};
}

/// pi(f) for pi(x, v) proportional to exp(-U(x) - |v|^2/2), d <= 2. The
/// velocity marginal is handled by Gauss-Hermite, positions by adaptive
/// Gauss-Kronrod on a box sized from the potential's growth.
template <PotentialModel Model>
ReferenceMean reference_mean(const Model& model, const TestFunction<Model::dim_tag>& f,
                             const QuadratureOptions& opt = {}) {
  using V = typename Model::vector_type;
  const int d = model.dim();
  if (d > 2) throw std::invalid_argument("reference_mean: dimension must be <= 2");
  const auto [L, u_min] = quadrature_box(model);

  auto compute = [&, L = L, u_min = u_min](const HermiteRule& rule) {
    detail::Integral num, den;
    if (d == 1) {
      V x(1);
      auto weight = [&](double s) {
        x[0] = s;
        return std::exp(-(model.value(x) - u_min));
      };
      num = detail::integrate_1d(
          [&](double s) {
            const double w = weight(s);
            return w == 0.0 ? 0.0 : w * detail::velocity_average(f, x, rule);
          },
          -L, L, opt);
      den = detail::integrate_1d(weight, -L, L, opt);
    } else {
      QuadratureOptions inner = opt;
      inner.panels = std::max(4, opt.panels / 2);
      auto nested = [&](bool with_f) {
        return detail::integrate_1d(
            [&](double s0) {
              return detail::integrate_1d(
                         [&](double s1) {
                           V x(2);
                           x << s0, s1;
                           const double w = std::exp(-(model.value(x) - u_min));
                           if (!with_f || w == 0.0) return w;
                           return w * detail::velocity_average(f, x, rule);
                         },
                         -L, L, inner)
                  .value;
            },
            -L, L, opt);
      };
      num = nested(true);
      den = nested(false);
    }
    const double value = num.value / den.value;
    const double err = num.error / den.value + std::abs(num.value) * den.error / (den.value * den.value);
    return std::pair{value, err};
  };

  const auto [value, quad_err] = compute(gauss_hermite(opt.hermite_nodes));
  double hermite_err = 0.0;
  if (!f.position_only) {
    const auto [refined, unused] = compute(gauss_hermite(2 * opt.hermite_nodes));
    (void)unused;
    hermite_err = std::abs(refined - value);
  }
  ReferenceMean out;
  out.value = value;
  out.abs_error_bound =
      10.0 * (quad_err + hermite_err) + 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(value));
  out.method = "gauss-kronrod-61 x[-" + std::to_string(L) + "," + std::to_string(L) + "]^" +
               std::to_string(d) + (f.position_only ? "" : " + gauss-hermite-" + std::to_string(opt.hermite_nodes));
  return out;
}

// ---------------------------------------------------------------------------
// Statistical-error sweeps
// ---------------------------------------------------------------------------

struct SweepConfig {
  std::vector<double> h_grid;
  double total_time = 1e5;
  int trajectories = 100;
  IntegratorKind integrator = IntegratorKind::em;
  double gamma = 2.0;
  std::string model_id = "sine";
  std::string f_id = "x";
  std::uint64_t master_seed = 1;
  std::vector<double> x0{0.2};
  std::vector<double> v0{-0.3};
  long long burn_in = 0;
  double h_max = 0.5;
  int workers = 1;

  void validate() const {
    if (h_grid.empty()) throw std::invalid_argument("sweep: empty h grid");
    for (double h : h_grid) {
      if (!(h > 0.0)) throw std::invalid_argument("sweep: all h must be > 0");
    }
    if (trajectories < 2) throw std::invalid_argument("sweep: M must be >= 2");
    if (total_time < *std::max_element(h_grid.begin(), h_grid.end())) {
      throw std::invalid_argument("sweep: T must be >= max h");
    }
    if (burn_in < 0) throw std::invalid_argument("sweep: burn-in must be >= 0");
  }
};

struct ErrorCell {
  double h = 0.0;
  long long n_steps = 0;
  int trajectories = 0;  // surviving trajectories
  double mse = 0.0;
  double mse_stderr = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  int diverged = 0;

  /// mse - variance (M-1)/M, i.e. the squared bias.
  double bias_squared() const { return bias * bias; }
};

struct ErrorReport {
  std::vector<ErrorCell> cells;
  /// mse of the cell with the smallest h.
  double floor_estimate = 0.0;
  double reference = 0.0;
};

/// Raised when every trajectory of a cell diverged.
class AllDivergedError : public std::runtime_error {
 public:
  explicit AllDivergedError(double h)
      : std::runtime_error("all trajectories diverged at h = " + std::to_string(h)), h_(h) {}
  AllDivergedError(double h, const std::string& message) : std::runtime_error(message), h_(h) {}
  double h() const { return h_; }

 private:
  double h_;
};

/// mse, bias, sample variance and mse standard error of per-trajectory errors.
inline ErrorCell summarize_errors(std::span<const double> e) {
  ErrorCell c;
  const auto m = static_cast<double>(e.size());
  c.trajectories = static_cast<int>(e.size());
  if (e.empty()) return c;
  CompensatedSum s1, s2;
  for (double x : e) {
    s1.add(x);
    s2.add(x * x);
  }
  c.bias = s1.value() / m;
  c.mse = s2.value() / m;
  if (e.size() > 1) {
    CompensatedSum dev, dev_sq;
    for (double x : e) {
      dev.add((x - c.bias) * (x - c.bias));
      dev_sq.add((x * x - c.mse) * (x * x - c.mse));
    }
    c.variance = dev.value() / (m - 1.0);
    c.mse_stderr = std::sqrt(dev_sq.value() / (m - 1.0)) / std::sqrt(m);
  }
  return c;
}

inline long long steps_for(double total_time, double h) {
  return std::max<long long>(1, std::llround(total_time / h));
}

/// E[e^2(N, h)] over the h grid with N = round(T / h). Trajectory i of
/// every cell uses the streams of index i, so cells share noise.
template <StochasticGradientModel SG>
ErrorReport run_sweep(const SweepConfig& cfg, const SG& sg,
                      const TestFunction<SG::base_type::dim_tag>& f, double reference) {
  constexpr int Dim = SG::base_type::dim_tag;
  cfg.validate();
  const int d = sg.base().dim();
  auto expand = [d](const std::vector<double>& v) {
    Vector<Dim> out(d);
    for (int i = 0; i < d; ++i) out[i] = v.size() == 1 ? v[0] : v.at(static_cast<std::size_t>(i));
    return out;
  };
  const State<Dim> z0{expand(cfg.x0), expand(cfg.v0)};

  ErrorReport report;
  report.reference = reference;
  for (double h : cfg.h_grid) {
    const StepParams params{cfg.gamma, h, cfg.h_max};
    params.validate();
    const long long n = steps_for(cfg.total_time, h);
    std::vector<std::optional<double>> errors(static_cast<std::size_t>(cfg.trajectories));
    parallel_for(errors.size(), cfg.workers, [&](std::size_t i) {
      auto streams = TrajectoryStreams::for_trajectory(cfg.master_seed, i);
      try {
        const auto avg = simulate_time_average(cfg.integrator, sg, params, f, z0, n, streams,
                                               cfg.burn_in);
        errors[i] = avg.average - reference;
      } catch (const DivergenceError&) {
        errors[i].reset();
      }
    });
    std::vector<double> survivors;
    for (const auto& e : errors) {
      if (e) survivors.push_back(*e);
    }
    if (survivors.empty()) throw AllDivergedError(h);
    ErrorCell cell = summarize_errors(survivors);
    cell.h = h;
    cell.n_steps = n;
    cell.diverged = cfg.trajectories - static_cast<int>(survivors.size());
    report.cells.push_back(cell);
  }
  const auto smallest = std::min_element(report.cells.begin(), report.cells.end(),
                                         [](const auto& a, const auto& b) { return a.h < b.h; });
  report.floor_estimate = smallest->mse;
  return report;
}

// ---------------------------------------------------------------------------
// Slopes
// ---------------------------------------------------------------------------

enum class FloorMode {
  none,
  smallest_h,  // subtract the report's floor_estimate
  variance,    // subtract each cell's own variance (M-1)/M, leaving bias^2
};

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  int cells_used = 0;
  double h_lo = 0.0;
  double h_hi = 0.0;
  FloorMode floor = FloorMode::none;
};

/// Least-squares fit of log y against log x.
inline std::pair<double, double> loglog_fit(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return {slope, (sy - slope * sx) / n};
}

/// Slope of log(mse - floor) against log h over cells with h in [h_lo, h_hi].
/// Cells whose floor-subtracted mse is not positive are dropped.
inline SlopeFit fit_slope(const ErrorReport& report, double h_lo, double h_hi,
                          FloorMode floor = FloorMode::none) {
  std::vector<double> hs, ys;
  for (const auto& c : report.cells) {
    if (c.h < h_lo * (1 - 1e-12) || c.h > h_hi * (1 + 1e-12)) continue;
    double y = c.mse;
    if (floor == FloorMode::smallest_h) y -= report.floor_estimate;
    if (floor == FloorMode::variance) {
      y -= c.variance * (c.trajectories - 1.0) / c.trajectories;
    }
    if (!(y > 0.0)) continue;
    hs.push_back(c.h);
    ys.push_back(y);
  }
  if (hs.size() < 3) {
    throw std::runtime_error("fit_slope: fewer than 3 usable cells in window");
  }
  const auto [slope, intercept] = loglog_fit(hs, ys);
  return {slope, intercept, static_cast<int>(hs.size()), h_lo, h_hi, floor};
}

}  // namespace langevin
