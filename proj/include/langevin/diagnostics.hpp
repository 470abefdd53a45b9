#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "langevin/brownian.hpp"
#include "langevin/estimator.hpp"
#include "langevin/integrators.hpp"
#include "langevin/model.hpp"
#include "langevin/parallel.hpp"

namespace langevin {

// ---------------------------------------------------------------------------
// Exponential decay fits
// ---------------------------------------------------------------------------

/// value(t) ~ prefactor * exp(-rate * t) over [t0, t1].
struct DecayFit {
  double rate = std::numeric_limits<double>::quiet_NaN();
  double prefactor = std::numeric_limits<double>::quiet_NaN();
  double r2 = 0.0;
  double t0 = 0.0;
  double t1 = 0.0;
  int points = 0;

  bool valid() const { return points >= 3 && std::isfinite(rate); }
};

/// Log-linear least squares. The first `transient` fraction of the time span
/// is skipped, and the window stops at the first value below
/// 3 * noise_floor.
inline DecayFit fit_exponential_decay(std::span<const double> times, std::span<const double> values,
                                      double noise_floor = 0.0, double transient = 0.1) {
  if (times.size() != values.size()) throw std::invalid_argument("fit_exponential_decay: size mismatch");
  DecayFit fit;
  if (times.empty()) return fit;
  const double start = times.front() + transient * (times.back() - times.front());
  const double cutoff = std::max(3.0 * noise_floor, std::numeric_limits<double>::min());
  std::vector<double> ts, ls;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < start) continue;
    if (!(values[i] > cutoff)) break;
    ts.push_back(times[i]);
    ls.push_back(std::log(values[i]));
  }
  fit.points = static_cast<int>(ts.size());
  if (ts.size() < 3) return fit;
  const auto n = static_cast<double>(ts.size());
  double st = 0, sl = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    st += ts[i];
    sl += ls[i];
  }
  const double mt = st / n, ml = sl / n;
  double stt = 0, stl = 0, sll = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    stt += (ts[i] - mt) * (ts[i] - mt);
    stl += (ts[i] - mt) * (ls[i] - ml);
    sll += (ls[i] - ml) * (ls[i] - ml);
  }
  const double slope = stl / stt;
  fit.rate = -slope;
  fit.prefactor = std::exp(ml - slope * mt);
  fit.r2 = sll > 0.0 ? std::clamp(stl * stl / (stt * sll), 0.0, 1.0) : 1.0;
  fit.t0 = ts.front();
  fit.t1 = ts.back();
  return fit;
}

// ---------------------------------------------------------------------------
// Strong order against a same-path reference
// ---------------------------------------------------------------------------

/// Brownian increments on a fine grid together with the exponentially
/// weighted companions J_k = int_cell exp(-gamma (s_{k+1} - s)) dB_s, so that
/// OU integrals over any union of cells are exact sums.
template <int Dim>
class OuCellPath {
 public:
  OuCellPath(const BrownianPath<Dim>& path, double gamma, RngStream& stream)
      : gamma_(gamma), width_(path.cell_width()), increments_(path.increments()) {
    const double w = width_;
    const double cov = -std::expm1(-gamma * w) / gamma;          // Cov(I, J)
    const double var_j = -std::expm1(-2.0 * gamma * w) / (2.0 * gamma);
    const double slope = cov / w;
    const double resid = std::sqrt(std::max(var_j - slope * cov, 0.0));
    weights_.reserve(increments_.size());
    for (const auto& dB : increments_) {
      Vector<Dim> j(dB.size());
      for (int i = 0; i < dB.size(); ++i) j[i] = slope * dB[i] + resid * stream.normal();
      weights_.push_back(std::move(j));
    }
    cell_decay_ = std::exp(-gamma * w);
  }

  double cell_width() const { return width_; }
  std::size_t size() const { return increments_.size(); }

  /// Sum of dB over cells [first, first + count).
  Vector<Dim> increment(std::size_t first, std::size_t count) const {
    Vector<Dim> acc = zero_vector<Dim>(static_cast<int>(increments_[first].size()));
    for (std::size_t k = first; k < first + count; ++k) acc += increments_[k];
    return acc;
  }

  /// (xi_x, xi_v) of the U flow over cells [first, first + count).
  std::pair<Vector<Dim>, Vector<Dim>> ou_integrals(std::size_t first, std::size_t count) const {
    const int d = static_cast<int>(increments_[first].size());
    Vector<Dim> sum_b = zero_vector<Dim>(d);
    Vector<Dim> sum_e = zero_vector<Dim>(d);
    for (std::size_t k = first; k < first + count; ++k) {
      sum_e = cell_decay_ * sum_e + weights_[k];
      sum_b += increments_[k];
    }
    const double scale = std::sqrt(2.0 * gamma_);
    Vector<Dim> xi_v = scale * sum_e;
    Vector<Dim> xi_x = (scale / gamma_) * (sum_b - sum_e);
    return {std::move(xi_x), std::move(xi_v)};
  }

 private:
  double gamma_;
  double width_;
  double cell_decay_ = 1.0;
  std::vector<Vector<Dim>> increments_;
  std::vector<Vector<Dim>> weights_;
};

/// Runs EM or UBU with step h along a fine path; h must be a whole number of
/// cells (two half-steps of whole cells for UBU).
template <PotentialModel Model>
State<Model::dim_tag> integrate_on_path(IntegratorKind kind, const Model& model, double gamma,
                                        double h, State<Model::dim_tag> z,
                                        const OuCellPath<Model::dim_tag>& path) {
  constexpr int Dim = Model::dim_tag;
  const double cells_f = h / path.cell_width();
  const auto cells = static_cast<std::size_t>(std::llround(cells_f));
  if (std::abs(cells_f - static_cast<double>(cells)) > 1e-9 || cells == 0) {
    throw std::invalid_argument("integrate_on_path: h is not a multiple of the path cell");
  }
  const std::size_t steps = path.size() / cells;
  auto grad = [&](const auto& x) { return model.gradient(x); };
  if (kind == IntegratorKind::em) {
    const double scale = std::sqrt(2.0 * gamma);
    for (std::size_t n = 0; n < steps; ++n) {
      Vector<Dim> noise = scale * path.increment(n * cells, cells);
      em_update(z, grad(z.x), gamma, h, noise);
      detail::require_finite(z, static_cast<long long>(n));
    }
  } else if (kind == IntegratorKind::ubu) {
    if (cells % 2 != 0) throw std::invalid_argument("integrate_on_path: UBU half-step must span whole cells");
    const std::size_t half = cells / 2;
    const UbuCoefficients c(gamma, h);
    for (std::size_t n = 0; n < steps; ++n) {
      const auto [xx1, xv1] = path.ou_integrals(n * cells, half);
      const auto [xx2, xv2] = path.ou_integrals(n * cells + half, half);
      ubu_update(z, c, grad, xx1, xv1, xx2, xv2);
      detail::require_finite(z, static_cast<long long>(n));
    }
  } else {
    throw std::invalid_argument("integrate_on_path: only em and ubu are supported");
  }
  return z;
}

struct StrongOrderConfig {
  IntegratorKind kind = IntegratorKind::em;
  double gamma = 2.0;
  std::vector<double> h_grid;
  double horizon = 1.0;
  int paths = 1000;
  std::uint64_t master_seed = 1;
  int reference_factor = 16;  // h_ref = h_min / reference_factor
  int workers = 1;
  std::vector<double> x0{0.2};
  std::vector<double> v0{-0.3};
};

struct StrongOrderResult {
  std::vector<double> h;
  std::vector<double> rms_error;
  double h_ref = 0.0;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = 0.0;
};

namespace detail {
inline int dyadic_exponent(double ratio, const char* what) {
  const double l = std::log2(ratio);
  const long r = std::lround(l);
  if (ratio < 1.0 - 1e-12 || std::abs(l - static_cast<double>(r)) > 1e-9) {
    throw std::invalid_argument(std::string("strong_order_probe: ") + what + " is not dyadic");
  }
  return static_cast<int>(r);
}

template <int Dim>
Vector<Dim> broadcast(const std::vector<double>& v, int d) {
  Vector<Dim> out(d);
  for (int i = 0; i < d; ++i) out[i] = v.size() == 1 ? v[0] : v.at(static_cast<std::size_t>(i));
  return out;
}
}  // namespace detail

/// Endpoint RMS error of EM/UBU at each h against UBU at h_ref on the same
/// Brownian path, and the fitted log-log slope.
template <PotentialModel Model>
StrongOrderResult strong_order_probe(const Model& model, const StrongOrderConfig& cfg) {
  constexpr int Dim = Model::dim_tag;
  if (cfg.h_grid.empty()) throw std::invalid_argument("strong_order_probe: empty h grid");
  if (!(cfg.horizon > 0.0) || cfg.horizon > 4.0) {
    throw std::invalid_argument("strong_order_probe: horizon must be in (0, 4]");
  }
  if (cfg.paths < 1) throw std::invalid_argument("strong_order_probe: need at least one path");
  if (cfg.reference_factor < 16) throw std::invalid_argument("strong_order_probe: reference factor must be >= 16");
  if (!(cfg.gamma > 0.0)) throw std::invalid_argument("strong_order_probe: gamma must be > 0");
  const double h_min = *std::min_element(cfg.h_grid.begin(), cfg.h_grid.end());
  const double h_max = *std::max_element(cfg.h_grid.begin(), cfg.h_grid.end());
  detail::dyadic_exponent(static_cast<double>(cfg.reference_factor), "reference factor");
  for (double h : cfg.h_grid) detail::dyadic_exponent(cfg.horizon / h, "T / h");
  const double h_ref = h_min / cfg.reference_factor;
  const int coarse_level = detail::dyadic_exponent(cfg.horizon / h_max, "T / h_max");
  const int fine_level = detail::dyadic_exponent(cfg.horizon / h_ref, "T / h_ref") + 1;
  const int d = model.dim();
  const State<Dim> z0{detail::broadcast<Dim>(cfg.x0, d), detail::broadcast<Dim>(cfg.v0, d)};

  const std::size_t nh = cfg.h_grid.size();
  std::vector<std::vector<double>> sq(static_cast<std::size_t>(cfg.paths), std::vector<double>(nh));
  parallel_for(sq.size(), cfg.workers, [&](std::size_t p) {
    RngStream stream = trajectory_stream(cfg.master_seed, p, Channel::noise);
    const auto coarse = BrownianPath<Dim>::sample(cfg.horizon, coarse_level, d, stream);
    const auto fine = refine(coarse, fine_level, stream);
    const OuCellPath<Dim> path(fine, cfg.gamma, stream);
    const auto ref = integrate_on_path(IntegratorKind::ubu, model, cfg.gamma, h_ref, z0, path);
    for (std::size_t j = 0; j < nh; ++j) {
      const auto z = integrate_on_path(cfg.kind, model, cfg.gamma, cfg.h_grid[j], z0, path);
      sq[p][j] = (z.x - ref.x).squaredNorm() + (z.v - ref.v).squaredNorm();
    }
  });

  StrongOrderResult out;
  out.h = cfg.h_grid;
  out.h_ref = h_ref;
  for (std::size_t j = 0; j < nh; ++j) {
    CompensatedSum s;
    for (const auto& row : sq) s.add(row[j]);
    out.rms_error.push_back(std::sqrt(s.value() / cfg.paths));
  }
  std::vector<double> hs, es;
  for (std::size_t j = 0; j < nh; ++j) {
    if (out.rms_error[j] > 0.0) {
      hs.push_back(out.h[j]);
      es.push_back(out.rms_error[j]);
    }
  }
  if (hs.size() >= 2) std::tie(out.slope, out.intercept) = loglog_fit(hs, es);
  return out;
}

// ---------------------------------------------------------------------------
// Lyapunov function and moments
// ---------------------------------------------------------------------------

/// H(x, v) = gamma |x|^2 + 2 x.v + |v|^2.
template <int Dim>
double lyapunov(double gamma, const Vector<Dim>& x, const Vector<Dim>& v) {
  return gamma * x.squaredNorm() + 2.0 * x.dot(v) + v.squaredNorm();
}

/// Generator applied to H: -2((gamma-1)|v|^2 + x.grad U + v.grad U) + 2 gamma d.
template <PotentialModel Model>
double lyapunov_generator(const Model& model, double gamma, const typename Model::vector_type& x,
                          const typename Model::vector_type& v) {
  const auto g = model.gradient(x);
  return -2.0 * ((gamma - 1.0) * v.squaredNorm() + x.dot(g) + v.dot(g)) +
         2.0 * gamma * static_cast<double>(x.size());
}

struct LyapunovFit {
  double a = 0.0;
  double b = 0.0;
  int violations = 0;  // outer-region points where the generator is >= 0
  bool feasible = false;
};

/// Fits L H <= -a H + b on a grid of states. a is the smallest ratio
/// -L H / H over the outer region (H >= max H / 4); b is then the smallest
/// constant valid on the whole grid.
template <PotentialModel Model>
LyapunovFit lyapunov_drift_check(const Model& model, double gamma,
                                 const std::vector<State<Model::dim_tag>>& grid) {
  if (!(gamma > 1.0)) throw std::invalid_argument("lyapunov_drift_check: gamma must be > 1");
  if (grid.empty()) throw std::invalid_argument("lyapunov_drift_check: empty grid");
  std::vector<double> gen, hs;
  double h_max = 0.0;
  for (const auto& z : grid) {
    gen.push_back(lyapunov_generator(model, gamma, z.x, z.v));
    hs.push_back(lyapunov(gamma, z.x, z.v));
    h_max = std::max(h_max, hs.back());
  }
  LyapunovFit fit;
  double a = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (hs[i] < 0.25 * h_max || hs[i] <= 0.0) continue;
    a = std::min(a, -gen[i] / hs[i]);
    if (gen[i] >= 0.0) ++fit.violations;
  }
  if (!std::isfinite(a)) return fit;
  fit.a = a;
  fit.b = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) fit.b = std::max(fit.b, gen[i] + a * hs[i]);
  fit.feasible = a > 0.0;
  return fit;
}

template <int Dim>
std::vector<State<Dim>> state_grid(int dim, double half_width, int points_per_axis) {
  if (dim != 1) {
    throw std::invalid_argument("state_grid: only d = 1 grids (over (x, v)) are supported");
  }
  std::vector<State<Dim>> grid;
  for (int i = 0; i < points_per_axis; ++i) {
    for (int j = 0; j < points_per_axis; ++j) {
      const double x = -half_width + 2.0 * half_width * i / (points_per_axis - 1);
      const double v = -half_width + 2.0 * half_width * j / (points_per_axis - 1);
      grid.push_back(make_state<Dim>(x, v));
    }
  }
  return grid;
}

struct MomentConfig {
  IntegratorKind kind = IntegratorKind::ubu;
  double gamma = 2.0;
  double h = 0.25;
  double r = 2.0;
  long long steps = 100000;
  int ensemble = 1000;
  int checkpoints = 50;
  double growth_limit = 50.0;
  bool zero_noise = false;
  std::uint64_t master_seed = 1;
  int workers = 1;
  std::vector<double> x0{0.2};
  std::vector<double> v0{-0.3};
};

struct MomentSeries {
  std::vector<long long> steps;
  std::vector<double> moment;  // E(|X_n| + |V_n| + 1)^{2r}
  double initial = 0.0;
  double max_ratio = 0.0;
  int diverged = 0;
  bool within_limit = false;
};

/// Ensemble estimates of E(|X_n| + |V_n| + 1)^{2r} at evenly spaced
/// checkpoints, n = 0 included.
template <PotentialModel Model>
MomentSeries moment_stability_probe(const Model& model, const MomentConfig& cfg) {
  constexpr int Dim = Model::dim_tag;
  if (!(cfg.gamma > 1.0)) throw std::invalid_argument("moment_stability_probe: gamma must be > 1");
  if (cfg.steps < 1 || cfg.ensemble < 1 || cfg.checkpoints < 1) {
    throw std::invalid_argument("moment_stability_probe: steps, ensemble and checkpoints must be >= 1");
  }
  if (cfg.kind != IntegratorKind::em && cfg.kind != IntegratorKind::ubu) {
    throw std::invalid_argument("moment_stability_probe: only em and ubu are supported");
  }
  const int d = model.dim();
  const State<Dim> z0{detail::broadcast<Dim>(cfg.x0, d), detail::broadcast<Dim>(cfg.v0, d)};
  MomentSeries out;
  for (int c = 0; c <= cfg.checkpoints; ++c) {
    out.steps.push_back(cfg.steps * c / cfg.checkpoints);
  }
  out.steps.erase(std::unique(out.steps.begin(), out.steps.end()), out.steps.end());
  auto moment = [&](const State<Dim>& z) { return std::pow(z.x.norm() + z.v.norm() + 1.0, 2.0 * cfg.r); };

  const std::size_t nc = out.steps.size();
  std::vector<std::vector<double>> samples(static_cast<std::size_t>(cfg.ensemble));
  auto grad = [&](const auto& x) { return model.gradient(x); };
  parallel_for(samples.size(), cfg.workers, [&](std::size_t i) {
    RngStream noise = trajectory_stream(cfg.master_seed, i, Channel::noise);
    State<Dim> z = z0;
    const EmStepper em(cfg.gamma, cfg.h);
    const UbuStepper ubu(cfg.gamma, cfg.h);
    const Vector<Dim> zero = zero_vector<Dim>(d);
    auto step = [&](State<Dim>& s) {
      if (cfg.kind == IntegratorKind::em) {
        if (cfg.zero_noise) em_update(s, grad(s.x), cfg.gamma, cfg.h, zero);
        else em.step(s, grad, noise);
      } else {
        if (cfg.zero_noise) ubu_update(s, ubu.coefficients(), grad, zero, zero, zero, zero);
        else ubu.step(s, grad, noise);
      }
    };
    std::vector<double> row;
    row.reserve(nc);
    long long n = 0;
    try {
      for (std::size_t c = 0; c < nc; ++c) {
        for (; n < out.steps[c]; ++n) {
          step(z);
          detail::require_finite(z, n);
        }
        row.push_back(moment(z));
      }
    } catch (const DivergenceError&) {
      row.clear();
    }
    samples[i] = std::move(row);
  });
  for (std::size_t c = 0; c < nc; ++c) {
    CompensatedSum s;
    int alive = 0;
    for (const auto& row : samples) {
      if (row.empty()) continue;
      s.add(row[c]);
      ++alive;
    }
    out.moment.push_back(alive > 0 ? s.value() / alive : std::numeric_limits<double>::infinity());
  }
  for (const auto& row : samples) out.diverged += row.empty() ? 1 : 0;
  out.initial = moment(z0);
  for (double m : out.moment) out.max_ratio = std::max(out.max_ratio, m / out.initial);
  out.within_limit = out.diverged == 0 && out.max_ratio <= cfg.growth_limit;
  return out;
}

// ---------------------------------------------------------------------------
// Tangent processes
// ---------------------------------------------------------------------------

/// (Q, P) for the first-variation process dQ = P dt, dP = (-hess U Q - gamma P) dt.
template <int Dim>
struct TangentState {
  Matrix<Dim> q;
  Matrix<Dim> p;

  static TangentState position_derivative(int d) {
    return {Matrix<Dim>::Identity(d, d), Matrix<Dim>::Zero(d, d)};
  }
  static TangentState velocity_derivative(int d) {
    return {Matrix<Dim>::Zero(d, d), Matrix<Dim>::Identity(d, d)};
  }
  static TangentState zero(int d) { return {Matrix<Dim>::Zero(d, d), Matrix<Dim>::Zero(d, d)}; }
};

/// Tr[W^T S W] with S = [[gamma, 1], [1, 1]] acting blockwise.
template <int Dim>
double tangent_lyapunov(double gamma, const TangentState<Dim>& w) {
  return gamma * w.q.squaredNorm() + 2.0 * (w.q.array() * w.p.array()).sum() + w.p.squaredNorm();
}

/// One classical RK4 step with the hessian frozen over dt.
template <int Dim>
void tangent_rk4_step(TangentState<Dim>& w, const Matrix<Dim>& hess, double gamma, double dt) {
  auto rhs = [&](const Matrix<Dim>& q, const Matrix<Dim>& p) {
    return std::pair<Matrix<Dim>, Matrix<Dim>>{p, -hess * q - gamma * p};
  };
  const auto [k1q, k1p] = rhs(w.q, w.p);
  const auto [k2q, k2p] = rhs(w.q + 0.5 * dt * k1q, w.p + 0.5 * dt * k1p);
  const auto [k3q, k3p] = rhs(w.q + 0.5 * dt * k2q, w.p + 0.5 * dt * k2p);
  const auto [k4q, k4p] = rhs(w.q + dt * k3q, w.p + dt * k3p);
  w.q += dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
  w.p += dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
}

struct TangentConfig {
  double gamma = 2.5;
  double horizon = 20.0;
  double h_state = 0.01;
  int ode_substeps = 4;  // dt_ode = h_state / ode_substeps
};

struct TangentSeries {
  std::vector<double> times;
  std::vector<double> values;
  DecayFit fit;
};

namespace detail {
template <PotentialModel Model>
void require_hessian(const Model& model) {
  if (!model.has_hessian()) {
    throw std::invalid_argument("tangent probes need a model with a hessian");
  }
}

// Advances state by one UBU step and its tangent along it (hessian frozen at
// the start-of-step position).
template <PotentialModel Model>
void tangent_step(const Model& model, const UbuStepper& ubu, const TangentConfig& cfg,
                  State<Model::dim_tag>& z, TangentState<Model::dim_tag>& w, RngStream& noise) {
  const auto hess = model.hessian(z.x);
  const double dt = cfg.h_state / cfg.ode_substeps;
  for (int s = 0; s < cfg.ode_substeps; ++s) tangent_rk4_step(w, hess, cfg.gamma, dt);
  ubu.step(z, [&](const auto& x) { return model.gradient(x); }, noise);
}
}  // namespace detail

/// Decay of sqrt(Tr[W_t^T S W_t]) along one UBU trajectory.
template <PotentialModel Model>
TangentSeries tangent_decay_probe(const Model& model, const TangentConfig& cfg,
                                  TangentState<Model::dim_tag> init, State<Model::dim_tag> z0,
                                  RngStream noise) {
  detail::require_hessian(model);
  const UbuStepper ubu(cfg.gamma, cfg.h_state);
  const auto steps = static_cast<long long>(std::llround(cfg.horizon / cfg.h_state));
  TangentSeries out;
  auto w = std::move(init);
  auto z = std::move(z0);
  for (long long n = 0; n <= steps; ++n) {
    out.times.push_back(static_cast<double>(n) * cfg.h_state);
    out.values.push_back(std::sqrt(std::max(tangent_lyapunov(cfg.gamma, w), 0.0)));
    if (n == steps) break;
    detail::tangent_step(model, ubu, cfg, z, w, noise);
    detail::require_finite(z, n);
  }
  out.fit = fit_exponential_decay(out.times, out.values, 1e-280);
  return out;
}

/// |Q - Q'| + |P - P'| (Frobenius) for tangents started at the same (Q0, P0)
/// along synchronously coupled trajectories from z0 and z0'.
template <PotentialModel Model>
TangentSeries tangent_coupling_probe(const Model& model, const TangentConfig& cfg,
                                     const TangentState<Model::dim_tag>& init,
                                     State<Model::dim_tag> z0, State<Model::dim_tag> z1,
                                     RngStream noise) {
  detail::require_hessian(model);
  const UbuStepper ubu(cfg.gamma, cfg.h_state);
  const auto steps = static_cast<long long>(std::llround(cfg.horizon / cfg.h_state));
  TangentSeries out;
  auto w0 = init;
  auto w1 = init;
  RngStream noise1 = noise;
  for (long long n = 0; n <= steps; ++n) {
    out.times.push_back(static_cast<double>(n) * cfg.h_state);
    out.values.push_back((w0.q - w1.q).norm() + (w0.p - w1.p).norm());
    if (n == steps) break;
    detail::tangent_step(model, ubu, cfg, z0, w0, noise);
    detail::tangent_step(model, ubu, cfg, z1, w1, noise1);
    detail::require_finite(z0, n);
    detail::require_finite(z1, n);
  }
  out.fit = fit_exponential_decay(out.times, out.values, 1e-280);
  return out;
}

struct CouplingLinearity {
  TangentSeries full_gap;
  TangentSeries half_gap;
  double amplitude_ratio = std::numeric_limits<double>::quiet_NaN();
};

/// Repeats the tangent coupling probe with the initial gap halved; the
/// ratio of fitted prefactors should be close to 2.
template <PotentialModel Model>
CouplingLinearity tangent_coupling_linearity(const Model& model, const TangentConfig& cfg,
                                             const TangentState<Model::dim_tag>& init,
                                             const State<Model::dim_tag>& z0,
                                             const State<Model::dim_tag>& gap, RngStream noise) {
  CouplingLinearity out;
  State<Model::dim_tag> far{z0.x + gap.x, z0.v + gap.v};
  State<Model::dim_tag> near{z0.x + 0.5 * gap.x, z0.v + 0.5 * gap.v};
  out.full_gap = tangent_coupling_probe(model, cfg, init, z0, far, noise);
  out.half_gap = tangent_coupling_probe(model, cfg, init, z0, near, noise);
  if (out.full_gap.fit.valid() && out.half_gap.fit.valid()) {
    // Compare amplitudes at a common time so differing fitted rates do not
    // leak into the ratio.
    const double t = 0.5 * (out.full_gap.fit.t0 + out.full_gap.fit.t1);
    auto amp = [t](const DecayFit& f) { return f.prefactor * std::exp(-f.rate * t); };
    out.amplitude_ratio = amp(out.full_gap.fit) / amp(out.half_gap.fit);
  }
  return out;
}

/// |x_t - x'_t| + |v_t - v'_t| under synchronous coupling (shared noise).
template <PotentialModel Model>
TangentSeries sync_coupling_probe(const Model& model, double gamma, State<Model::dim_tag> z0,
                                  State<Model::dim_tag> z1, double horizon, double h,
                                  RngStream noise) {
  const UbuStepper ubu(gamma, h);
  auto grad = [&](const auto& x) { return model.gradient(x); };
  const auto steps = static_cast<long long>(std::llround(horizon / h));
  RngStream noise1 = noise;
  TangentSeries out;
  for (long long n = 0; n <= steps; ++n) {
    out.times.push_back(static_cast<double>(n) * h);
    out.values.push_back((z0.x - z1.x).norm() + (z0.v - z1.v).norm());
    if (n == steps) break;
    ubu.step(z0, grad, noise);
    ubu.step(z1, grad, noise1);
    detail::require_finite(z0, n);
    detail::require_finite(z1, n);
  }
  // Below ~1e-13 the gap is round-off.
  out.fit = fit_exponential_decay(out.times, out.values, 1e-13);
  return out;
}

// ---------------------------------------------------------------------------
// Kolmogorov solution and the discrete Poisson identity
// ---------------------------------------------------------------------------

struct MonteCarloConfig {
  double gamma = 2.0;
  double h_mc = 0.0625;
  int n_mc = 10000;
  std::uint64_t master_seed = 1;
  int workers = 1;
};

struct KolmogorovEstimate {
  std::vector<double> t;
  std::vector<double> u;
  std::vector<double> stderr_;
  DecayFit fit;
  bool inconclusive = false;
};

namespace detail {
inline long long whole_steps(double t, double h, const char* what) {
  const double n = t / h;
  const auto r = std::llround(n);
  if (std::abs(n - static_cast<double>(r)) > 1e-9 * std::max(1.0, n)) {
    throw std::invalid_argument(std::string(what) + " is not a multiple of the simulation step");
  }
  return r;
}

// f(Z_{k_j h_mc}) - pi(f) for ascending checkpoints k_j along one UBU path.
template <PotentialModel Model>
void record_path(const Model& model, const UbuStepper& ubu, State<Model::dim_tag> z,
                 const TestFunction<Model::dim_tag>& f, double pi_f,
                 std::span<const long long> checkpoints, RngStream& noise, std::span<double> out) {
  auto grad = [&](const auto& x) { return model.gradient(x); };
  long long n = 0;
  for (std::size_t j = 0; j < checkpoints.size(); ++j) {
    for (; n < checkpoints[j]; ++n) {
      ubu.step(z, grad, noise);
      require_finite(z, n);
    }
    out[j] = f(z) - pi_f;
  }
}
}  // namespace detail

/// Monte Carlo estimate of u(x, v, t) = E f(z_t) - pi(f) from one start
/// point, using UBU at step h_mc. t = 0 is evaluated exactly.
template <PotentialModel Model>
KolmogorovEstimate kolmogorov_probe(const Model& model, const TestFunction<Model::dim_tag>& f,
                                    double pi_f, const State<Model::dim_tag>& start,
                                    const std::vector<double>& t_grid, const MonteCarloConfig& cfg,
                                    std::uint64_t point_index = 0) {
  if (cfg.n_mc < 2) throw std::invalid_argument("kolmogorov_probe: n_mc must be >= 2");
  std::vector<long long> ks;
  for (double t : t_grid) ks.push_back(detail::whole_steps(t, cfg.h_mc, "kolmogorov_probe: t"));
  if (!std::is_sorted(ks.begin(), ks.end())) throw std::invalid_argument("kolmogorov_probe: t grid must be ascending");
  const UbuStepper ubu(cfg.gamma, cfg.h_mc);
  const std::size_t nt = ks.size();
  std::vector<double> samples(static_cast<std::size_t>(cfg.n_mc) * nt);
  parallel_for(static_cast<std::size_t>(cfg.n_mc), cfg.workers, [&](std::size_t i) {
    RngStream noise = trajectory_stream(cfg.master_seed, point_index * cfg.n_mc + i, Channel::noise);
    detail::record_path(model, ubu, start, f, pi_f, ks, noise,
                        std::span<double>(samples).subspan(i * nt, nt));
  });
  KolmogorovEstimate out;
  out.t = t_grid;
  bool any_significant = false;
  for (std::size_t j = 0; j < nt; ++j) {
    if (ks[j] == 0) {
      out.u.push_back(f(start) - pi_f);
      out.stderr_.push_back(0.0);
      continue;
    }
    std::vector<double> col(static_cast<std::size_t>(cfg.n_mc));
    for (std::size_t i = 0; i < col.size(); ++i) col[i] = samples[i * nt + j];
    const ErrorCell s = summarize_errors(col);
    out.u.push_back(s.bias);
    out.stderr_.push_back(std::sqrt(s.variance / cfg.n_mc));
    if (std::abs(s.bias) > out.stderr_.back()) any_significant = true;
  }
  out.inconclusive = !any_significant && nt > 1;
  std::vector<double> ts, us;
  for (std::size_t j = 0; j < nt; ++j) {
    if (std::abs(out.u[j]) > 3.0 * out.stderr_[j]) {
      ts.push_back(out.t[j]);
      us.push_back(std::abs(out.u[j]));
    }
  }
  out.fit = fit_exponential_decay(ts, us, 0.0, 0.0);
  return out;
}

struct PoissonResidual {
  double residual = 0.0;
  double stderr_ = 0.0;
  double phi = 0.0;        // h sum_{n=0}^{n_max} u(z, n h)
  double phi_next = 0.0;   // E phi(z_h)
  double tail = 0.0;       // u(z, (n_max + 1) h) estimate
  double tail_stderr = 0.0;
  bool tail_ok = true;
};

/// Residual (phi_h(z) - E phi_h(z_h)) / h - (f(z) - pi(f)) with
/// phi_h = h sum_{n=0}^{n_max} u(., n h). Two independent ensembles estimate
/// phi_h(z) and E phi_h(z_h); a path from z_h is a path from z shifted by
/// one step, so the second ensemble records times (n + 1) h.
template <PotentialModel Model>
PoissonResidual discrete_poisson_residual(const Model& model, const TestFunction<Model::dim_tag>& f,
                                          double pi_f, const State<Model::dim_tag>& start, double h,
                                          long long n_max, const MonteCarloConfig& cfg,
                                          std::uint64_t point_index = 0) {
  if (n_max < 1) throw std::invalid_argument("discrete_poisson_residual: n_max must be >= 1");
  if (cfg.n_mc < 2) throw std::invalid_argument("discrete_poisson_residual: n_mc must be >= 2");
  const long long sub = detail::whole_steps(h, cfg.h_mc, "discrete_poisson_residual: h");
  const UbuStepper ubu(cfg.gamma, cfg.h_mc);
  const auto n_terms = static_cast<std::size_t>(n_max + 1);
  std::vector<long long> now(n_terms), next(n_terms);
  for (std::size_t n = 0; n < n_terms; ++n) {
    now[n] = static_cast<long long>(n) * sub;
    next[n] = static_cast<long long>(n + 1) * sub;
  }
  const auto m = static_cast<std::size_t>(cfg.n_mc);
  std::vector<double> sum_now(m), sum_next(m), last(m);
  const std::uint64_t base = point_index * 2 * m;
  parallel_for(2 * m, cfg.workers, [&](std::size_t i) {
    std::vector<double> row(n_terms);
    RngStream noise = trajectory_stream(cfg.master_seed, base + i, Channel::noise);
    const bool second = i >= m;
    detail::record_path(model, ubu, start, f, pi_f, second ? next : now, noise, row);
    CompensatedSum s;
    for (double r : row) s.add(r);
    if (second) {
      sum_next[i - m] = s.value();
      last[i - m] = row.back();
    } else {
      sum_now[i] = s.value();
    }
  });
  const ErrorCell a = summarize_errors(sum_now);
  const ErrorCell b = summarize_errors(sum_next);
  const ErrorCell t = summarize_errors(last);
  PoissonResidual out;
  out.phi = h * a.bias;
  out.phi_next = h * b.bias;
  out.residual = a.bias - b.bias - (f(start) - pi_f);
  out.stderr_ = std::sqrt(a.variance / cfg.n_mc + b.variance / cfg.n_mc);
  out.tail = t.bias;
  out.tail_stderr = std::sqrt(t.variance / cfg.n_mc);
  // The truncation shifts the residual by -tail; it must be negligible
  // against the residual's own noise.
  out.tail_ok = std::abs(out.tail) <= 3.0 * out.tail_stderr || std::abs(out.tail) <= 0.1 * out.stderr_;
  return out;
}

}  // namespace langevin
