#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "langevin/rng.hpp"
#include "langevin/types.hpp"

namespace langevin {

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck stochastic integrals
// ---------------------------------------------------------------------------

/// decay(t) = exp(-gamma t)
inline double ou_decay(double gamma, double t) { return std::exp(-gamma * t); }

/// drift_integral(t) = int_0^t exp(-gamma s) ds = (1 - exp(-gamma t)) / gamma
inline double ou_drift_integral(double gamma, double t) {
  return -std::expm1(-gamma * t) / gamma;
}

/// Per-coordinate covariance of
///   xi_x = sqrt(2 gamma) int_0^t F(t-s) dB_s,
///   xi_v = sqrt(2 gamma) int_0^t E(t-s) dB_s,
/// with E(t) = exp(-gamma t) and F(t) = int_0^t E.
struct OuCovariance {
  double gamma = 1.0;
  double t = 0.0;
  double sigma_xx = 0.0;
  double sigma_xv = 0.0;
  double sigma_vv = 0.0;

  double determinant() const { return sigma_xx * sigma_vv - sigma_xv * sigma_xv; }
  bool is_psd() const {
    return sigma_xx >= 0.0 && sigma_vv >= 0.0 &&
           determinant() >= -1e-14 * std::max(1.0, sigma_xx * sigma_vv);
  }
};

namespace detail {

// a - 2(1 - e^{-a}) + (1 - e^{-2a})/2, which is O(a^3) and cancels badly
// for small a; the series coefficient of a^n is (-1)^{n+1}(2^{n-1}-2)/n!.
inline double ou_position_kernel(double a) {
  if (a < 0.1) {
    double term = a * a / 2.0;  // a^n / n! at n = 2
    double pow2 = 2.0;          // 2^{n-1}
    double sum = 0.0;
    for (int n = 3; n <= 16; ++n) {
      term *= a / n;
      pow2 *= 2.0;
      const double sign = (n % 2 == 1) ? 1.0 : -1.0;
      sum += sign * (pow2 - 2.0) * term;
    }
    return sum;
  }
  return a + 2.0 * std::expm1(-a) - 0.5 * std::expm1(-2.0 * a);
}

}  // namespace detail

/// Closed-form covariance of the OU integrals over a step of length t
/// (Ito isometry).
inline OuCovariance ou_covariance(double gamma, double t) {
  if (!(gamma > 0.0)) throw std::invalid_argument("ou_covariance: gamma must be > 0");
  if (!(t >= 0.0)) throw std::invalid_argument("ou_covariance: t must be >= 0");
  OuCovariance c;
  c.gamma = gamma;
  c.t = t;
  const double a = gamma * t;
  const double one_minus_e = -std::expm1(-a);
  c.sigma_vv = -std::expm1(-2.0 * a);
  c.sigma_xv = one_minus_e * one_minus_e / gamma;
  c.sigma_xx = 2.0 / (gamma * gamma) * detail::ou_position_kernel(a);
  return c;
}

/// Lower Cholesky factor of a 2x2 OuCovariance.
struct OuFactor {
  double l11 = 0.0;
  double l21 = 0.0;
  double l22 = 0.0;

  explicit OuFactor(const OuCovariance& cov) {
    if (!cov.is_psd()) {
      throw std::domain_error("sample_ou_increment: covariance is not positive semidefinite");
    }
    l11 = std::sqrt(std::max(cov.sigma_xx, 0.0));
    l21 = l11 > 0.0 ? cov.sigma_xv / l11 : 0.0;
    l22 = std::sqrt(std::max(cov.sigma_vv - l21 * l21, 0.0));
  }
  OuFactor() = default;

  std::pair<double, double> apply(double z1, double z2) const {
    return {l11 * z1, l21 * z1 + l22 * z2};
  }
};

/// Draws (xi_x, xi_v) with coordinates independent and each pair jointly
/// Gaussian with the given covariance.
template <int Dim>
std::pair<Vector<Dim>, Vector<Dim>> sample_ou_increment(const OuFactor& factor,
                                                        int dim, RngStream& stream) {
  Vector<Dim> xi_x(dim);
  Vector<Dim> xi_v(dim);
  for (int i = 0; i < dim; ++i) {
    const double z1 = stream.normal();
    const double z2 = stream.normal();
    std::tie(xi_x[i], xi_v[i]) = factor.apply(z1, z2);
  }
  return {std::move(xi_x), std::move(xi_v)};
}

template <int Dim>
std::pair<Vector<Dim>, Vector<Dim>> sample_ou_increment(const OuCovariance& cov,
                                                        int dim, RngStream& stream) {
  return sample_ou_increment<Dim>(OuFactor(cov), dim, stream);
}

// ---------------------------------------------------------------------------
// Brownian paths on a dyadic grid
// ---------------------------------------------------------------------------

/// Brownian increments over [0, horizon] on 2^level equal cells.
template <int Dim>
class BrownianPath {
 public:
  BrownianPath(double horizon, int level, std::vector<Vector<Dim>> increments)
      : horizon_(horizon), level_(level), increments_(std::move(increments)) {
    if (increments_.size() != cells(level_)) {
      throw std::invalid_argument("BrownianPath: increment count must be 2^level");
    }
  }

  static BrownianPath sample(double horizon, int level, int dim, RngStream& stream) {
    if (!(horizon > 0.0)) throw std::invalid_argument("BrownianPath: horizon must be > 0");
    if (level < 0 || level > 40) throw std::invalid_argument("BrownianPath: bad level");
    const double sd = std::sqrt(horizon / static_cast<double>(cells(level)));
    std::vector<Vector<Dim>> inc(cells(level), Vector<Dim>(dim));
    for (auto& dB : inc) {
      for (int i = 0; i < dim; ++i) dB[i] = sd * stream.normal();
    }
    return BrownianPath(horizon, level, std::move(inc));
  }

  double horizon() const { return horizon_; }
  int level() const { return level_; }
  int dim() const { return static_cast<int>(increments_.front().size()); }
  std::size_t size() const { return increments_.size(); }
  double cell_width() const { return horizon_ / static_cast<double>(size()); }
  const std::vector<Vector<Dim>>& increments() const { return increments_; }
  const Vector<Dim>& operator[](std::size_t k) const { return increments_[k]; }

  /// B_t at a grid time k * cell_width.
  Vector<Dim> value_at_cell(std::size_t k) const {
    Vector<Dim> b = zero_vector<Dim>(dim());
    for (std::size_t j = 0; j < k; ++j) b += increments_[j];
    return b;
  }

  static std::size_t cells(int level) { return std::size_t{1} << level; }

 private:
  double horizon_;
  int level_;
  std::vector<Vector<Dim>> increments_;
};

/// Refines by Brownian-bridge midpoint insertion, one level at a time. Each
/// parent increment D over width w splits into (D/2 + sqrt(w)/2 z, rest).
template <int Dim>
BrownianPath<Dim> refine(const BrownianPath<Dim>& path, int target_level, RngStream& stream) {
  if (target_level < path.level()) {
    throw std::invalid_argument("refine: target level below current level");
  }
  std::vector<Vector<Dim>> inc = path.increments();
  double width = path.cell_width();
  const int dim = path.dim();
  for (int level = path.level(); level < target_level; ++level) {
    std::vector<Vector<Dim>> next;
    next.reserve(2 * inc.size());
    const double bridge_sd = 0.5 * std::sqrt(width);
    for (const auto& parent : inc) {
      Vector<Dim> left(dim);
      for (int i = 0; i < dim; ++i) left[i] = 0.5 * parent[i] + bridge_sd * stream.normal();
      Vector<Dim> right = parent - left;
      next.push_back(std::move(left));
      next.push_back(std::move(right));
    }
    inc = std::move(next);
    width *= 0.5;
  }
  return BrownianPath<Dim>(path.horizon(), target_level, std::move(inc));
}

/// Left-point Riemann sum  sum_k weight(s_k - start) dB_k  over the cells of
/// [start, start + length]. Window ends must fall on cell boundaries and the
/// window must span at least 64 cells.
template <int Dim>
Vector<Dim> weighted_integral(const BrownianPath<Dim>& path,
                              const std::function<double(double)>& weight,
                              double start, double length) {
  const double width = path.cell_width();
  const double tol = 1e-9;
  if (start < -tol * width || start + length > path.horizon() + tol * width || length < 0.0) {
    throw std::out_of_range("weighted_integral: window outside path horizon");
  }
  const double first_f = start / width;
  const double count_f = length / width;
  const auto first = static_cast<std::size_t>(std::llround(first_f));
  const auto count = static_cast<std::size_t>(std::llround(count_f));
  if (std::abs(first_f - static_cast<double>(first)) > tol ||
      std::abs(count_f - static_cast<double>(count)) > tol) {
    throw std::invalid_argument("weighted_integral: window not aligned to path cells");
  }
  if (count > 0 && count < 64) {
    throw std::invalid_argument("weighted_integral: path too coarse for window (need >= 64 cells)");
  }
  Vector<Dim> acc = zero_vector<Dim>(path.dim());
  for (std::size_t k = 0; k < count; ++k) {
    acc += weight(static_cast<double>(k) * width) * path[first + k];
  }
  return acc;
}

}  // namespace langevin
